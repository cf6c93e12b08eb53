use proptest::prelude::*;
use semdiff::io::{load_label_map, save_label_map};
use semdiff::metrics::{boundary_fscore, boundary_mask, confusion_matrix, miou, LabelMap};

fn label_pair() -> impl Strategy<Value = (usize, usize, usize, Vec<usize>, Vec<usize>)> {
    (2usize..=4, 2usize..=9, 2usize..=9).prop_flat_map(|(n, h, w)| {
        (
            Just(n),
            Just(h),
            Just(w),
            prop::collection::vec(0..n, h * w),
            prop::collection::vec(0..n, h * w),
        )
    })
}

proptest! {
    #[test]
    fn miou_ignores_class_renaming((n, h, w, p, g) in label_pair(), shift in 1usize..4) {
        let rename = |v: &[usize]| v.iter().map(|&c| (c + shift) % n).collect::<Vec<_>>();
        let a = miou(&confusion_matrix(&LabelMap::new(h, w, p.clone()).unwrap(), &LabelMap::new(h, w, g.clone()).unwrap(), n, None).unwrap());
        let b = miou(&confusion_matrix(&LabelMap::new(h, w, rename(&p)).unwrap(), &LabelMap::new(h, w, rename(&g)).unwrap(), n, None).unwrap());
        prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one((_n, h, w, _p, g) in label_pair()) {
        let gt = LabelMap::new(h, w, g).unwrap();
        for width in [1, 3] {
            if let Some(f) = boundary_fscore(&gt, &gt, width).unwrap() {
                prop_assert_eq!(f, 1.0);
            }
        }
        let cm = confusion_matrix(&gt, &gt, 4, None).unwrap();
        prop_assert_eq!(miou(&cm), Some(1.0));
    }

    #[test]
    fn bands_nest((_n, h, w, _p, g) in label_pair()) {
        let gt = LabelMap::new(h, w, g).unwrap();
        let b1 = boundary_mask(&gt, 1).unwrap();
        let b3 = boundary_mask(&gt, 3).unwrap();
        let b5 = boundary_mask(&gt, 5).unwrap();
        prop_assert!(b1.is_subset_of(&b3) && b3.is_subset_of(&b5));
    }

    #[test]
    fn scores_are_unit_interval((n, h, w, p, g) in label_pair()) {
        let (pred, gt) = (LabelMap::new(h, w, p).unwrap(), LabelMap::new(h, w, g).unwrap());
        let m = miou(&confusion_matrix(&pred, &gt, n, None).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        if let Some(f) = boundary_fscore(&pred, &gt, 3).unwrap() {
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}

#[test]
fn uniform_map_has_no_band() {
    let gt = LabelMap::new(5, 5, vec![2; 25]).unwrap();
    assert_eq!(boundary_mask(&gt, 3).unwrap().count(), 0);
    assert_eq!(boundary_fscore(&gt, &gt, 3).unwrap(), None);
}

#[test]
fn even_band_width_rejected() {
    let gt = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
    assert!(boundary_mask(&gt, 2).is_err());
}

#[test]
fn out_of_range_label_rejected() {
    let a = LabelMap::new(1, 2, vec![0, 3]).unwrap();
    assert!(confusion_matrix(&a, &a, 3, None).is_err());
}

#[test]
fn label_maps_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let lm = LabelMap::from_fn(3, 5, |y, x| (y * 5 + x) % 4).unwrap();
    let pgm = dir.path().join("l.pgm");
    save_label_map(&pgm, &lm).unwrap();
    assert_eq!(load_label_map(&pgm).unwrap(), lm);

    let big = LabelMap::new(1, 1, vec![300]).unwrap();
    assert!(save_label_map(dir.path().join("big.pgm"), &big).is_err());
}
