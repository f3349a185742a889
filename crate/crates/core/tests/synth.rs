use std::fs;
use std::path::Path;

use hybridseg::metrics::dice;
use hybridseg::synth::{generate_dataset, load_dataset, save_dataset, DistortionKnobs, SynthConfig};

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = SynthConfig {
        n_strong: 10,
        n_weak: 60,
        knobs: DistortionKnobs {
            p_drop: 0.4,
            ..DistortionKnobs::default()
        },
        seed: 7,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&generate_dataset(&cfg).unwrap(), &cfg, a.path()).unwrap();
    save_dataset(&generate_dataset(&cfg).unwrap(), &cfg, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let loaded = load_dataset(a.path()).unwrap().dataset;
    let ds = generate_dataset(&cfg).unwrap();
    for (x, y) in loaded.iter().zip(ds.iter()) {
        assert_eq!((x.id, x.supervision, x.corrupted), (y.id, y.supervision, y.corrupted));
        assert_eq!(x.mask, y.mask);
        for (p, q) in x.image.data().iter().zip(y.image.data()) {
            assert!((p - q).abs() <= 1e-9);
        }
    }
}

#[test]
fn weak_order_and_clean_masks_survive_corruption() {
    let base = SynthConfig {
        n_weak: 40,
        seed: 11,
        knobs: DistortionKnobs::NONE,
        ..SynthConfig::default()
    };
    let harsh = SynthConfig {
        knobs: DistortionKnobs {
            p_drop: 0.5,
            p_blur: 0.5,
            p_flip: 0.5,
            ..DistortionKnobs::default()
        },
        ..base.clone()
    };
    let (a, b) = (generate_dataset(&base).unwrap(), generate_dataset(&harsh).unwrap());
    for (k, (x, y)) in a.weak.iter().zip(&b.weak).enumerate() {
        assert_eq!(x.id, base.n_strong + k);
        assert_eq!(y.id, x.id);
        assert_eq!(x.clean_mask, y.clean_mask);
    }
    assert!(b.weak.iter().any(|i| i.corrupted));
    assert!(a.weak.iter().all(|i| !i.corrupted));
}

fn mean_weak_dice(knobs: DistortionKnobs) -> f64 {
    let cfg = SynthConfig {
        n_strong: 1,
        n_weak: 200,
        knobs,
        seed: 23,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    ds.weak
        .iter()
        .map(|i| dice(&i.mask, i.clean_mask.as_ref().unwrap(), 1).unwrap())
        .sum::<f64>()
        / ds.weak.len() as f64
}

#[test]
fn weak_quality_never_improves_with_stronger_distortion() {
    type Setter = fn(&mut DistortionKnobs, f64);
    let knobs: [(&str, Setter, [f64; 4]); 6] = [
        ("scale_jitter", |k, v| k.scale_jitter = v, [0.0, 0.1, 0.2, 0.4]),
        ("offset_jitter", |k, v| k.offset_jitter = v, [0.0, 1.0, 2.0, 4.0]),
        ("rotation_jitter", |k, v| k.rotation_jitter = v, [0.0, 0.3, 0.6, 1.2]),
        ("p_drop", |k, v| k.p_drop = v, [0.0, 0.2, 0.5, 1.0]),
        ("p_blur", |k, v| k.p_blur = v, [0.0, 0.2, 0.5, 1.0]),
        ("p_flip", |k, v| k.p_flip = v, [0.0, 0.2, 0.5, 1.0]),
    ];
    for (name, set, values) in knobs {
        let means: Vec<f64> = values
            .iter()
            .map(|&v| {
                let mut k = DistortionKnobs::NONE;
                set(&mut k, v);
                mean_weak_dice(k)
            })
            .collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0], "{name}: {means:?}");
        }
    }
}
