use std::sync::Arc;

use proptest::prelude::*;

use mshift::datagen::simulate;
use mshift::imputers::{IceConfig, IceModel};
use mshift::missingness::{apply_mechanism, MechanismConfig, MechanismKind};
use mshift::rng::rng_from;

fn kind() -> impl Strategy<Value = MechanismKind> {
    prop_oneof![
        Just(MechanismKind::Mcar),
        Just(MechanismKind::MarLogistic),
        Just(MechanismKind::Selfmask),
        Just(MechanismKind::MarY),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masking_keeps_observed_cells(
        d in 2usize..6,
        n in 40usize..160,
        rate in 0.05f64..0.6,
        kind in kind(),
        seed in 0u64..1000,
    ) {
        let ds = Arc::new(simulate(d, 0.7, n, seed).unwrap());
        let md = apply_mechanism(ds.clone(), &MechanismConfig::new(kind, rate), &mut rng_from(seed + 1)).unwrap();
        prop_assert_eq!(md.mask.len(), n * d);
        for i in 0..n {
            for j in 0..d {
                let v = md.row(i)[j];
                if md.is_missing(i, j) {
                    prop_assert!(v.is_nan());
                } else {
                    prop_assert_eq!(v.to_bits(), ds.x.row(i)[j].to_bits());
                }
            }
        }
        let r = md.missing_rate();
        prop_assert!((0.0..=1.0).contains(&r));
        for c in md.column_rates() {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn imputation_fills_only_missing_cells(
        d in 2usize..5,
        n in 60usize..150,
        rate in 0.1f64..0.5,
        probabilistic in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let ds = Arc::new(simulate(d, 0.7, n, seed).unwrap());
        let md = apply_mechanism(ds, &MechanismConfig::new(MechanismKind::Mcar, rate), &mut rng_from(seed)).unwrap();
        let cfg = if probabilistic { IceConfig::mice() } else { IceConfig::default() };
        let model = IceModel::fit(&md.xtilde, None, cfg).unwrap();
        let done = model.transform(&md.xtilde, None, seed).unwrap();
        prop_assert_eq!(done.len(), cfg.n_imp);
        for m in &done {
            prop_assert_eq!(m.shape(), (n, d));
            for i in 0..n {
                for j in 0..d {
                    let v = m.row(i)[j];
                    prop_assert!(v.is_finite());
                    if !md.is_missing(i, j) {
                        prop_assert_eq!(v.to_bits(), md.row(i)[j].to_bits());
                    }
                }
            }
        }
    }
}
