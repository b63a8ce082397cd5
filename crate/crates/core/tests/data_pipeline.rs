use mvclip_core::data::checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model};
use mvclip_core::data::image::{avg_pool_5x5, load_image, to_model_input, RawImage};
use mvclip_core::data::manifest::{load_cases, load_manifest};
use mvclip_core::data::synthetic::{generate_synthetic, synthetic_cases, write_synthetic, SyntheticSpec, Task};
use mvclip_core::model::{ClipModel, ModelConfig};
use mvclip_core::text::{canonical_prompts, Vocabulary};
use mvclip_core::train::Normalization;
use mvclip_core::vision::View;
use mvclip_core::Error;
use proptest::prelude::*;

#[test]
fn pooled_extent_is_the_ceiling_of_a_fifth() {
    for w in 1..=100 {
        for h in 1..=100 {
            let raw = RawImage::new(w, h, 8, vec![7; w * h]).unwrap();
            let p = avg_pool_5x5(&raw);
            assert_eq!((p.width, p.height), (w.div_ceil(5), h.div_ceil(5)), "{w}x{h}");
            assert!(p.samples.iter().all(|&s| s == 7));
        }
    }
}

fn raw_image() -> impl Strategy<Value = RawImage> {
    (1usize..40, 1usize..40, prop::bool::ANY).prop_flat_map(|(w, h, sixteen)| {
        let max = if sixteen { 4095u16 } else { 255 };
        prop::collection::vec(0..=max, w * h)
            .prop_map(move |s| RawImage::new(w, h, if sixteen { 16 } else { 8 }, s).unwrap())
    })
}

proptest! {
    #[test]
    fn model_input_stays_in_gray_range(raw in raw_image(), size in 1usize..48) {
        let t = to_model_input(&raw, size).unwrap();
        prop_assert_eq!(t.shape(), &[size, size, 3]);
        prop_assert!(t.data().iter().all(|v| (0.0..=255.0).contains(v)));
        prop_assert!(t.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn pooled_values_stay_within_the_input_range(raw in raw_image()) {
        let p = avg_pool_5x5(&raw);
        let lo = *raw.samples.iter().min().unwrap();
        let hi = *raw.samples.iter().max().unwrap();
        prop_assert!(p.samples.iter().all(|&s| s >= lo && s <= hi));
    }

    #[test]
    fn synthetic_balance_is_exact(n in 1usize..200, balance in 0.05f64..0.95, seed in any::<u64>()) {
        let spec = SyntheticSpec { n_cases: n, image_size: 8, balance, seed, ..SyntheticSpec::default() };
        let cases = generate_synthetic(&spec).unwrap();
        let pos = cases.iter().filter(|c| c.label == 1).count();
        prop_assert_eq!(pos, (n as f64 * balance).round() as usize);
    }
}

#[test]
fn synthetic_files_are_reproducible() {
    let spec = SyntheticSpec {
        task: Task::Correspondence,
        n_cases: 6,
        image_size: 16,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_synthetic(&spec, a.path()).unwrap();
    let mb = write_synthetic(&spec, b.path()).unwrap();
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    for entry in std::fs::read_dir(a.path().join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        let x = std::fs::read(a.path().join("images").join(&name)).unwrap();
        let y = std::fs::read(b.path().join("images").join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    // loading the written files gives the in-memory cases
    let records = load_manifest(&ma, &View::ALL).unwrap();
    let loaded = load_cases(&records, 16, 3).unwrap();
    let direct = synthetic_cases(&spec, &View::ALL, 16, 3).unwrap();
    assert_eq!(loaded, direct);
    let first = load_image(&a.path().join("images/case0000_LCC.png")).unwrap();
    assert_eq!((first.width, first.height), (16, 16));
}

#[test]
fn manifest_with_a_missing_view_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_cases: 2,
        image_size: 8,
        ..SyntheticSpec::default()
    };
    let manifest = write_synthetic(&spec, dir.path()).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    let trimmed: String = text.lines().filter(|l| !l.contains("RMLO")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&manifest, trimmed).unwrap();
    assert!(load_manifest(&manifest, &View::ALL).is_err());
    assert!(load_manifest(&manifest, &View::ALL[..2]).is_ok());
}

fn model(seed: u64) -> ClipModel<f32> {
    let vocab = Vocabulary::build(&canonical_prompts().all());
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.vision.image_size = 16;
    ClipModel::new(cfg, vocab, seed).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut m = model(3);
    m.params.set_trainable("vision.proj.weight", false).unwrap();
    let config = serde_json::json!({"note": "round trip"});
    save_checkpoint(&path, &m.params, config.clone()).unwrap();
    let (reg, back) = load_checkpoint(&path).unwrap();
    assert_eq!(back, config);
    assert_eq!(reg.len(), m.params.len());
    for ((n1, p1), (n2, p2)) in m.params.iter().zip(reg.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(p1.trainable, p2.trainable);
        assert_eq!(p1.tensor.shape(), p2.tensor.shape());
        assert!(p1.tensor.data().iter().zip(p2.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    let norm = Normalization { mean: 12.5, std: 3.25 };
    save_model(&path, &m, norm, serde_json::json!({"fold": 0})).unwrap();
    let (loaded, snap) = load_model(&path, None).unwrap();
    assert_eq!(loaded.params, m.params);
    assert_eq!(loaded.config, m.config);
    assert_eq!(snap.normalization, norm);
}

#[test]
fn truncated_blob_and_wrong_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let m = model(4);
    save_model(&path, &m, Normalization::IDENTITY, serde_json::Value::Null).unwrap();
    let mut other = m.config.clone();
    other.vision.width = 32;
    other.vision.heads = 2;
    assert!(load_model(&path, Some(&other)).is_err());

    let blob = path.with_extension("bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
}
