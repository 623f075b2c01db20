//! In-plane connected components and small binary-mask helpers.

use crate::volume::Plane;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// One connected region of a 2D mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    /// Inclusive pixel bounds (y0, x0, y1, x1).
    pub bounds: (usize, usize, usize, usize),
    /// Mean pixel position (cy, cx).
    pub centroid: (f64, f64),
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_mask(&self, h: usize, w: usize) -> Plane<u8> {
        let mut m = Plane::new(h, w);
        for &p in &self.pixels {
            m.data[p] = 1;
        }
        m
    }
}

/// Labels the non-zero pixels of `mask`. Components are ordered by their
/// first pixel in row-major scan order, so the result is deterministic.
pub fn connected_components(mask: &Plane<u8>, conn: Connectivity) -> Vec<Component> {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    for start in 0..h * w {
        if mask.data[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.data[q] != 0 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        pixels.sort_unstable();
        out.push(summarize(pixels, w));
    }
    out
}

fn summarize(pixels: Vec<usize>, w: usize) -> Component {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    let (mut sy, mut sx) = (0.0f64, 0.0f64);
    for &p in &pixels {
        let (y, x) = (p / w, p % w);
        y0 = y0.min(y);
        x0 = x0.min(x);
        y1 = y1.max(y);
        x1 = x1.max(x);
        sy += y as f64;
        sx += x as f64;
    }
    let n = pixels.len() as f64;
    Component {
        bounds: (y0, x0, y1, x1),
        centroid: (sy / n, sx / n),
        pixels,
    }
}

/// Dilation with a Euclidean disk of the given radius (in pixels).
pub fn dilate_disk(mask: &Plane<u8>, radius: usize) -> Plane<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as isize;
    let mut out = Plane::new(mask.h, mask.w);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) == 0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < mask.h && (nx as usize) < mask.w {
                        out.set(ny as usize, nx as usize, 1);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(rows: &[&str]) -> Plane<u8> {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| u8::from(b == b'#')))
            .collect();
        Plane::from_vec(h, w, data)
    }

    #[test]
    fn diagonal_pixels_join_only_under_eight_connectivity() {
        let m = plane(&["#..", ".#.", "..#"]);
        assert_eq!(connected_components(&m, Connectivity::Eight).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Four).len(), 3);
    }

    #[test]
    fn centroid_and_bounds() {
        let m = plane(&["....", ".##.", ".##.", "...#"]);
        let c = connected_components(&m, Connectivity::Four);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].centroid, (1.5, 1.5));
        assert_eq!(c[0].bounds, (1, 1, 2, 2));
        assert_eq!(c[1].pixels, vec![15]);
    }

    #[test]
    fn dilation_of_point_is_disk() {
        let mut m = Plane::new(7, 7);
        m.set(3, 3, 1);
        let d = dilate_disk(&m, 2);
        assert_eq!(d.count_nonzero(), 13);
        assert_eq!(dilate_disk(&m, 0), m);
    }
}
