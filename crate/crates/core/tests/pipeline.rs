mod common;

use dynloc::autodiff::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor};
use dynloc::channel_sim::{derive_environment, Mutation, Rect};
use dynloc::cmatrix::CMatrix;
use dynloc::da::{build_datasets, train, AreaMap, LabeledDataset, Method, Provenance, TrainConfig, TrainedModel};
use dynloc::eval::{localization_errors, percentile, read_percentiles, ErrorReport};
use dynloc::fingerprint::AdcmTransform;
use dynloc::io::{file_bytes, DatasetFile};
use dynloc::nn::Architecture;
use dynloc::Execution;
use num_complex::Complex64;
use proptest::prelude::*;

use common::desk_env;

#[test]
fn library_pipeline_end_to_end() {
    let t1 = desk_env(11);
    let t2 = derive_environment(&t1, &Mutation::Remove(vec![0, 4, 8]), "t2").unwrap();
    let splits = build_datasets(&t1, &t2, 120, 120, 40, 3, Execution::Parallel).unwrap();
    let arch = Architecture::reference(16, 32);
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Baseline, Method::Ae, Method::Gr] {
        let mut cfg = TrainConfig::reference(method, 2);
        cfg.epochs = 3;
        cfg.batch_size = 40;
        cfg.lr = dynloc::cli::DESK_LR;
        let m = train(
            &splits.source,
            Some(&splits.target),
            &arch,
            &t1.area,
            &cfg,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(m.history.len(), 3);
        assert!(m.history.iter().all(|h| h.loc.is_finite() && h.aux.is_finite()));
        assert_eq!(m.history.iter().all(|h| h.aux == 0.0), method == Method::Baseline);

        let path = dir.path().join(format!("{method}.model"));
        m.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        let r = localization_errors(&back, &splits.test_target, Execution::Parallel).unwrap();
        let seq = localization_errors(&m, &splits.test_target, Execution::Sequential).unwrap();
        assert_eq!(r, seq);
        assert_eq!(r.len(), 40);

        let preds = m
            .predict_batch(&splits.test_source.fingerprints, Execution::Parallel)
            .unwrap();
        let wide = t1.area.expanded(0.125 * t1.area.width());
        let inside = preds.iter().filter(|p| wide.contains(**p)).count();
        assert!(
            inside as f64 >= 0.99 * preds.len() as f64,
            "{method}: {inside} of {}",
            preds.len()
        );
    }
}

#[test]
fn percentile_report_round_trips_through_csv() {
    let r = ErrorReport::new(vec![5.0, 1.0, 3.0, 2.0, 4.0], "m", "d").unwrap();
    assert!((r.percentile(80.0).unwrap() - 4.2).abs() < 1e-12);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    r.write_percentiles(&p).unwrap();
    for ((qa, va), (qb, vb)) in read_percentiles(&p).unwrap().iter().zip(r.percentile_table()) {
        assert_eq!(*qa, qb);
        assert!((va - vb).abs() <= 1e-12);
    }
}

fn complex_matrix(l: usize, k: usize) -> impl Strategy<Value = CMatrix> {
    prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), l * k)
        .prop_map(move |v| CMatrix::from_vec(l, k, v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn percentiles_are_monotone_and_bracketed(mut v in prop::collection::vec(0.0..100.0f64, 1..40), a in 0.0..100.0f64, b in 0.0..100.0f64) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(percentile(&v, lo).unwrap() <= percentile(&v, hi).unwrap());
        prop_assert_eq!(percentile(&v, 0.0).unwrap(), v[0]);
        prop_assert_eq!(percentile(&v, 100.0).unwrap(), *v.last().unwrap());
    }

    #[test]
    fn dataset_files_round_trip_bitwise(
        fps in prop::collection::vec(complex_matrix(2, 4), 1..6),
        labeled in any::<bool>(),
        scale in 1e-6..1e3f64,
    ) {
        let n = fps.len();
        let file = DatasetFile {
            n_antennas: 2,
            n_subcarriers: 4,
            scale,
            locations: labeled.then(|| (0..n).map(|i| [i as f64 * 0.5, -(i as f64)]).collect()),
            fingerprints: fps,
        };
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        prop_assert_eq!(bytes.len() as u64, file_bytes(2, 4, n, labeled));
        let back = DatasetFile::read_from(&mut bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(bytes, again);
        prop_assert_eq!(back, file);
    }

    #[test]
    fn adcm_preserves_energy(h in complex_matrix(4, 8)) {
        let t = AdcmTransform::new(4, 8).unwrap();
        let a = t.forward(&h).unwrap();
        let n = h.frobenius_norm().max(1e-300);
        prop_assert!((a.frobenius_norm() - h.frobenius_norm()).abs() <= 1e-12 * n);
        prop_assert!(t.inverse(&a).unwrap().sub(&h).unwrap().frobenius_norm() <= 1e-12 * n);
    }

    #[test]
    fn area_map_inverts(x in -20.0..20.0f64, y in 40.0..80.0f64) {
        let m = AreaMap::new(&Rect::reference_default()).unwrap();
        let q = m.normalize([x, y]);
        prop_assert!(q[0].abs() <= 1.0 + 1e-12 && q[1].abs() <= 1.0 + 1e-12);
        let p = m.denormalize(q);
        prop_assert!((p[0] - x).abs() < 1e-12 && (p[1] - y).abs() < 1e-12);
    }

    #[test]
    fn reversal_scales_any_upstream(u in prop::collection::vec(-1e6..1e6f64, 1..32), lambda in 0.0..10.0f64) {
        let mut t = Tape::new();
        let x = Tensor::new(vec![u.len()], vec![0.25; u.len()]).unwrap().with_grad(true);
        let id = t.leaf(&x);
        let r = t.grl(id, lambda);
        prop_assert_eq!(t.value(r), x.data());
        let g = t.backward_with(r, u.clone()).unwrap();
        for (a, b) in g.get(id).unwrap().iter().zip(&u) {
            prop_assert_eq!(*a, -lambda * b);
        }
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e9..1e9f64, 1..20)) {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        s.insert("b.bias", Tensor::new(vec![1, values.len()], values).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &s).unwrap();
        prop_assert_eq!(read_checkpoint(&mut bytes.as_slice()).unwrap(), s);
    }
}

#[test]
fn labeled_files_load_only_as_labeled_data() {
    let env = desk_env(2);
    let ds = dynloc::da::generate_labeled(&env, 5, 1, Execution::Sequential).unwrap();
    let prov = Provenance {
        time_label: "t1".into(),
        seed: 1,
    };
    let back = LabeledDataset::from_file(ds.to_file(), prov.clone()).unwrap();
    assert_eq!(back.locations, ds.locations);
    let stripped = ds.strip_labels().to_file();
    assert!(matches!(
        LabeledDataset::from_file(stripped, prov),
        Err(dynloc::Error::MissingLabel(_))
    ));
}
