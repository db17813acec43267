use hitlseg::data::{read_pgm, write_pgm, GrayImage, Mask};
use hitlseg::eval::dice_iou;
use hitlseg::hitl::{error_region, hard_set_size, sample_corrective_points, select_hard};
use hitlseg::model::Polarity;
use hitlseg::uncertainty::{sample_weight, UncertaintyHyper};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask_pair(max_side: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let bits = proptest::collection::vec(0u8..2, h * w);
        (bits.clone(), bits).prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn hard_set_law(u in proptest::collection::vec(-5.0f64..5.0, 1..64), tenths in 1usize..=10) {
        let r = tenths as f64 / 10.0;
        let hs = select_hard(&u, r).unwrap();
        let k = (tenths * u.len() / 10).max(1);
        prop_assert_eq!(hs.indices.len(), k);
        prop_assert_eq!(hard_set_size(u.len(), r), k);
        // every unselected score is no larger than every selected one
        let min_selected = hs.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        for (i, &v) in u.iter().enumerate() {
            if !hs.indices.contains(&i) {
                prop_assert!(v <= min_selected);
            }
        }
        prop_assert!(hs.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn corrective_points_lie_in_error_region((m, y) in mask_pair(10), n in 1usize..6, seed in any::<u64>()) {
        let e = error_region(&m, &y).unwrap();
        let pts = sample_corrective_points(&e, n, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(pts.len(), n.min(e.e.count()));
        for p in &pts {
            prop_assert!(e.e.get(p.x, p.y));
            prop_assert_eq!(p.polarity == Polarity::Positive, y.get(p.x, p.y));
        }
        let mut seen = pts.clone();
        seen.sort_by_key(|p| (p.y, p.x));
        seen.dedup();
        prop_assert_eq!(seen.len(), pts.len());
    }

    #[test]
    fn dice_and_iou_are_linked((m, y) in mask_pair(9)) {
        let (d, j) = dice_iou(&m, &y).unwrap();
        let (d2, j2) = dice_iou(&y, &m).unwrap();
        prop_assert_eq!((d, j), (d2, j2));
        prop_assert!((0.0..=1.0).contains(&j) && j <= d);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }

    #[test]
    fn mask_bit_packing_round_trips((m, _) in mask_pair(17)) {
        let packed = m.pack_bits();
        prop_assert_eq!(packed.len(), (m.height * m.width).div_ceil(8));
        prop_assert_eq!(Mask::unpack_bits(m.height, m.width, &packed).unwrap(), m);
    }

    #[test]
    fn sample_weight_stays_in_range(u_vl in 0.0f64..=2.0, l in 0.0f64..=1.0) {
        let h = UncertaintyHyper::default();
        let u = h.beta_vl * u_vl + l;
        let w = sample_weight(u, &h);
        prop_assert!(w >= 1.0 && w <= 2f64.exp() + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn pgm_files_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u8>()) {
        let pixels: Vec<u8> = (0..h * w).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = GrayImage::new(h, w, pixels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&img, &path).unwrap();
        prop_assert_eq!(read_pgm(&path).unwrap(), img);
    }
}
