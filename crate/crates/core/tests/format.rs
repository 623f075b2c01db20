mod oracles;

use proptest::prelude::*;
use vessel_core::volume::{payload_path, read_image, read_label, read_volume, write_image, write_label, VoxelData};
use vessel_core::{AnyVolume, Dims, LabelVolume, Spacing, Volume3D};

#[test]
fn thousand_random_volumes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oracles::roundtrip_failures(1000, 5, dir.path()), 0);
}

#[test]
fn payload_is_raw_little_endian_zyx() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(2, 3, 4);
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    let img = Volume3D::from_f32(dims, Spacing([0.6, 0.5, 0.4]), data.clone()).unwrap();
    let p = dir.path().join("img.vvolh");
    write_image(&img, &p).unwrap();
    let raw = std::fs::read(payload_path(&p)).unwrap();
    assert_eq!(raw.len(), 96);
    for (z, y, x) in [(0, 0, 0), (1, 2, 3), (1, 0, 2)] {
        let off = ((z * 3) + y) * 4 + x;
        let v = f32::from_le_bytes(raw[off * 4..off * 4 + 4].try_into().unwrap());
        assert_eq!(v, data[dims.index(z, y, x)]);
    }
    let header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(header["dims"], serde_json::json!([2, 3, 4]));
    assert_eq!(header["byte_order"], "little");
    assert_eq!(header["layout"], "zyx");
    assert_eq!(header["kind"], "image");
    assert_eq!(read_image(&p).unwrap(), img);
}

#[test]
fn kind_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let lab = LabelVolume::empty(Dims::new(2, 2, 2), Spacing::isotropic(1.0));
    let p = dir.path().join("l.vvolh");
    write_label(&lab, &p).unwrap();
    assert!(read_image(&p).is_err());
    assert!(matches!(read_volume(&p).unwrap(), AnyVolume::Label(_)));
    assert!(read_label(dir.path().join("missing.vvolh")).is_err());
}

#[test]
fn invalid_volumes_are_not_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut lab = LabelVolume::empty(Dims::new(2, 2, 2), Spacing::isotropic(1.0));
    lab.data[3] = 7;
    assert!(write_label(&lab, dir.path().join("bad.vvolh")).is_err());
    assert!(Volume3D::new(Dims::new(2, 2, 2), Spacing::isotropic(1.0), VoxelData::U8(vec![0; 7])).is_err());
    assert!(Volume3D::from_f32(Dims::new(1, 1, 1), Spacing([1.0, 0.0, 1.0]), vec![0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slices_extract_and_insert_back(d in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let dims = Dims::new(d, h, w);
        let data: Vec<u8> = (0..dims.len()).map(|i| ((seed >> (i % 60)) % 3) as u8).collect();
        let v = LabelVolume::new(dims, Spacing::isotropic(1.0), data, vec![]).unwrap();
        let mut u = LabelVolume::empty(dims, v.spacing);
        for z in 0..d {
            let s = v.extract_slice(z).unwrap();
            prop_assert_eq!(&s.data[..], v.slice_data(z));
            u.insert_slice(z, &s).unwrap();
        }
        prop_assert_eq!(&u.data, &v.data);
        prop_assert!(v.extract_slice(d).is_err());
    }
}
