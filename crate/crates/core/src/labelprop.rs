//! Geometric pseudo-labels from sparse axial annotations.
//!
//! * A-IPL copies the nearest annotated slice verbatim.
//! * C-IPL links vessel components across annotated slices into tracks,
//!   linearly interpolates their centroids into a centerline, and translates
//!   each source mask along that centerline into the unlabeled gap slices.

use crate::components::{connected_components, Component, Connectivity};
use crate::volume::{LabelVolume, Plane, BACKGROUND, LUMEN};

pub const DEFAULT_MATCH_RADIUS: f64 = 10.0;

/// One vessel component on one annotated slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub z: usize,
    /// (row-major pixel index, class id) for every pixel of the component.
    pub pixels: Vec<(usize, u8)>,
    pub centroid: (f64, f64),
}

/// A vessel followed across annotated slices, at most one entry per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTrack {
    pub track_id: usize,
    pub entries: Vec<TrackEntry>,
}

impl SliceTrack {
    pub fn first_z(&self) -> usize {
        self.entries[0].z
    }

    pub fn last_z(&self) -> usize {
        self.entries[self.entries.len() - 1].z
    }
}

/// Interpolated centroid per slice over a track's span.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    pub track_id: usize,
    pub z_start: usize,
    pub points: Vec<(f64, f64)>,
}

impl Centerline {
    pub fn at(&self, z: usize) -> Option<(f64, f64)> {
        z.checked_sub(self.z_start)
            .and_then(|i| self.points.get(i))
            .copied()
    }

    pub fn z_end(&self) -> usize {
        self.z_start + self.points.len() - 1
    }
}

/// Merged-foreground (classes 1 and 2) mask of a label plane.
pub fn vessel_mask(plane: &Plane<u8>) -> Plane<u8> {
    Plane::from_vec(
        plane.h,
        plane.w,
        plane.data.iter().map(|&v| u8::from(v != BACKGROUND)).collect(),
    )
}

fn slice_components(sparse: &LabelVolume, z: usize) -> Vec<(Component, Vec<(usize, u8)>)> {
    let plane = sparse.extract_slice(z).expect("annotated slice in range");
    connected_components(&vessel_mask(&plane), Connectivity::Eight)
        .into_iter()
        .map(|c| {
            let px = c.pixels.iter().map(|&p| (p, plane.data[p])).collect();
            (c, px)
        })
        .collect()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Links components on consecutive annotated slices.
///
/// A track only continues from the annotated slice immediately before; its
/// most recent centroid is matched greedily (closest pair first) to the new
/// components within `match_radius`. Unmatched components open new tracks.
pub fn build_tracks(sparse: &LabelVolume, match_radius: f64) -> Vec<SliceTrack> {
    let mut tracks: Vec<SliceTrack> = Vec::new();
    let mut prev_z: Option<usize> = None;
    for &z in &sparse.annotated_slices {
        let comps = slice_components(sparse, z);
        let open: Vec<usize> = match prev_z {
            Some(pz) => (0..tracks.len()).filter(|&t| tracks[t].last_z() == pz).collect(),
            None => Vec::new(),
        };
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for &t in &open {
            let last = tracks[t].entries.last().unwrap().centroid;
            for (ci, (c, _)) in comps.iter().enumerate() {
                let d = dist(last, c.centroid);
                if d <= match_radius {
                    pairs.push((d, t, ci));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_taken = vec![false; tracks.len()];
        let mut assigned: Vec<Option<usize>> = vec![None; comps.len()];
        for (_, t, ci) in pairs {
            if !track_taken[t] && assigned[ci].is_none() {
                track_taken[t] = true;
                assigned[ci] = Some(t);
            }
        }
        for (ci, (c, px)) in comps.into_iter().enumerate() {
            let entry = TrackEntry {
                z,
                pixels: px,
                centroid: c.centroid,
            };
            match assigned[ci] {
                Some(t) => tracks[t].entries.push(entry),
                None => {
                    let track_id = tracks.len();
                    tracks.push(SliceTrack {
                        track_id,
                        entries: vec![entry],
                    });
                }
            }
        }
        prev_z = Some(z);
    }
    tracks
}

/// Piecewise-linear centroid path between the track's first and last entry.
pub fn interpolate_centerline(track: &SliceTrack) -> Centerline {
    let z_start = track.first_z();
    let mut points = vec![track.entries[0].centroid];
    for pair in track.entries.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let span = (b.z - a.z) as f64;
        for z in a.z + 1..=b.z {
            let t = (z - a.z) as f64 / span;
            points.push((
                a.centroid.0 + t * (b.centroid.0 - a.centroid.0),
                a.centroid.1 + t * (b.centroid.1 - a.centroid.1),
            ));
        }
    }
    Centerline {
        track_id: track.track_id,
        z_start,
        points,
    }
}

fn paste(out: &mut [u8], h: usize, w: usize, pixels: &[(usize, u8)], shift: (i64, i64)) {
    for &(p, class) in pixels {
        let y = (p / w) as i64 + shift.0;
        let x = (p % w) as i64 + shift.1;
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            continue;
        }
        let q = y as usize * w + x as usize;
        // lumen wins over wall; background never overwrites
        if out[q] != LUMEN {
            out[q] = class;
        }
    }
}

/// Centroid-guided interpolation (C-IPL).
pub fn propagate_cipl(sparse: &LabelVolume, match_radius: f64) -> LabelVolume {
    let dims = sparse.dims;
    let n = dims.plane_len();
    let mut out = LabelVolume::empty(dims, sparse.spacing);
    let mut labeled = vec![false; dims.d];
    for &z in &sparse.annotated_slices {
        out.data[z * n..(z + 1) * n].copy_from_slice(sparse.slice_data(z));
        labeled[z] = true;
    }
    let tracks = build_tracks(sparse, match_radius);
    for track in &tracks {
        let line = interpolate_centerline(track);
        for pair in track.entries.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            for z in a.z + 1..b.z {
                if sparse.is_annotated(z) {
                    continue;
                }
                let src = if z - a.z <= b.z - z { a } else { b };
                let c = line.at(z).expect("z inside track span");
                let shift = (
                    (c.0 - src.centroid.0).round() as i64,
                    (c.1 - src.centroid.1).round() as i64,
                );
                paste(&mut out.data[z * n..(z + 1) * n], dims.h, dims.w, &src.pixels, shift);
                labeled[z] = true;
            }
        }
    }
    out.annotated_slices = (0..dims.d).filter(|&z| labeled[z]).collect();
    out
}

/// Adjacency-based interpolation (A-IPL): nearest annotated slice, ties to
/// the lower index; nothing outside the annotated span.
pub fn propagate_aipl(sparse: &LabelVolume) -> LabelVolume {
    let dims = sparse.dims;
    let n = dims.plane_len();
    let mut out = LabelVolume::empty(dims, sparse.spacing);
    let ann = &sparse.annotated_slices;
    let (Some(&first), Some(&last)) = (ann.first(), ann.last()) else {
        return out;
    };
    for z in first..=last {
        let i = ann.partition_point(|&a| a <= z);
        let below = ann[i - 1];
        let src = match ann.get(i) {
            Some(&above) if above - z < z - below => above,
            _ => below,
        };
        out.data[z * n..(z + 1) * n].copy_from_slice(sparse.slice_data(src));
    }
    out.annotated_slices = (first..=last).collect();
    out
}
