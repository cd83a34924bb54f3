use std::collections::BTreeMap;

use dascd_core::data::{load_pair, save_label, save_rgb, Manifest, ManifestEntry, Split};
use dascd_core::losses::DistanceMap;
use dascd_core::metrics::{confusion, metrics, threshold, Confusion};
use dascd_core::params::ParamStore;
use dascd_core::train::{load_dataset, predict, train, Adam};
use dascd_core::{DasNet, ModelConfig, RunConfig, Tensor};

fn small() -> RunConfig {
    RunConfig::from_kv(
        "image_size=16\ntrain_pairs=24\nval_pairs=4\ntest_pairs=4\nepochs=6\nlr=0.001\n",
    )
    .unwrap()
}

#[test]
fn adam_follows_scalar_recursion_on_a_parabola() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(1.0));
    let mut adam = Adam::new(0.1);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * store.get("x").unwrap().item().unwrap();
        adam.step(&mut store, &BTreeMap::from([("x".to_string(), vec![g])]))
            .unwrap();

        let g = 2.0 * x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= 0.1 * mh / (vh.sqrt() + 1e-8);
    }
    let got = store.get("x").unwrap().item().unwrap();
    assert!((got - x).abs() < 1e-12, "{got} vs {x}");
    assert!(got.abs() < 0.05);
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let mut cfg = small();
    cfg.epochs = 0;
    let data = load_dataset(&cfg).unwrap();
    let ck = train(&cfg, &data, |_| {}).unwrap();
    assert!(ck.loss_history.is_empty());
    let again = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(ck.model.params, again.model.params);
    // η and γ start at zero.
    assert_eq!(
        ck.model.params.get("att.sa.eta").unwrap().item().unwrap(),
        0.0
    );
    assert_eq!(
        ck.model.params.get("att.ca.gamma").unwrap().item().unwrap(),
        0.0
    );
}

#[test]
fn training_lowers_the_loss() {
    let cfg = small();
    let data = load_dataset(&cfg).unwrap();
    let mut seen = Vec::new();
    let ck = train(&cfg, &data, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, (1..=6).collect::<Vec<_>>());
    let h = &ck.loss_history;
    assert!(h.last().unwrap() < h.first().unwrap(), "{h:?}");
}

#[test]
fn seeds_change_the_run() {
    let mut cfg = small();
    cfg.epochs = 1;
    let data = load_dataset(&cfg).unwrap();
    let a = train(&cfg, &data, |_| {}).unwrap();
    cfg.seed = 1;
    let b = train(&cfg, &data, |_| {}).unwrap();
    assert_ne!(a.model.params, b.model.params);
    assert_ne!(load_dataset(&cfg).unwrap(), data);
}

#[test]
fn oracle_and_silent_predictors() {
    let data = load_dataset(&small()).unwrap();
    let mut perfect = Confusion::default();
    let mut silent = Confusion::default();
    for ex in &data.test {
        let (h, w) = ex.label.shape();
        let d = DistanceMap::from_values(h, w, ex.label.data().iter().map(|&y| y as f64).collect())
            .unwrap();
        perfect.merge(&confusion(&threshold(&d, 0.5), &ex.label).unwrap());
        let zero = DistanceMap::from_values(h, w, vec![0.0; h * w]).unwrap();
        silent.merge(&confusion(&threshold(&zero, 0.5), &ex.label).unwrap());
    }
    let r = metrics(perfect);
    assert_eq!((r.precision, r.recall, r.f1, r.oa), (1.0, 1.0, 1.0, 1.0));
    let r = metrics(silent);
    assert_eq!(r.recall, 0.0);
    assert_eq!(r.oa, r.counts.tn as f64 / r.counts.total() as f64);
}

#[test]
fn identical_pair_at_initialisation_predicts_nothing() {
    let cfg = small();
    let model = DasNet::init(ModelConfig::from(&cfg), 9).unwrap();
    let data = load_dataset(&cfg).unwrap();
    let mut pair = data.test[0].pair.clone();
    pair.t1 = pair.t0.clone();
    let p = predict(&model, &pair, 0.0).unwrap();
    assert!(p.distance.values().iter().all(|&v| v == 0.0));
    assert_eq!(p.change.positives(), 0);
}

#[test]
fn manifest_round_trip_reproduces_synthetic_data() {
    let cfg = small();
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = Manifest::default();
    for split in Split::ALL {
        for (i, ex) in data.split(split).iter().enumerate() {
            let e = ManifestEntry {
                t0: dir.path().join(format!("{split}_{i}_a.png")),
                t1: dir.path().join(format!("{split}_{i}_b.png")),
                label: dir.path().join(format!("{split}_{i}_y.png")),
                split,
            };
            save_rgb(&e.t0, &ex.pair.t0).unwrap();
            save_rgb(&e.t1, &ex.pair.t1).unwrap();
            save_label(&e.label, &ex.label).unwrap();
            let (pair, label) = load_pair(&e).unwrap();
            assert_eq!((&pair, &label), (&ex.pair, &ex.label));
            manifest.entries.push(e);
        }
    }
    let path = dir.path().join("m.tsv");
    std::fs::write(&path, manifest.to_text(dir.path())).unwrap();
    let from_files =
        load_dataset(&RunConfig::from_kv(&format!("manifest={}", path.display())).unwrap())
            .unwrap();
    assert_eq!(from_files, data);
}
