use std::collections::BTreeSet;

use coprop_core::annotate::{build_keyframe_subset, KeyframeItem, KeyframeSubset};
use coprop_core::checkpoint::TrainingMeta;
use coprop_core::dataset::save_sample;
use coprop_core::error::Error;
use coprop_core::keyframe::{finetune_keyframe, train_keyframe, KeyframeConfig, KeyframeModelConfig, KeyframeNet, KeyframeTrainConfig};
use coprop_core::nn::ParamId;
use coprop_core::synth::{corpus_specs, generate_scene, ChangeKind, CorpusConfig, GeneratedScene};
use coprop_core::types::{Frame, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenes(n: usize, cfg: &CorpusConfig, seed: u64) -> Vec<GeneratedScene<f64>> {
    corpus_specs(n, cfg, seed).unwrap().iter().map(|s| generate_scene(s).unwrap()).collect()
}

fn item(g: &GeneratedScene<f64>, t: usize) -> KeyframeItem<f64> {
    KeyframeItem {
        video_id: g.clip.video_id.clone(),
        frame_index: t,
        frame: g.clip.frames()[t].clone(),
        audio_row: g.audio.row(t).to_vec(),
        mask: g.masks.labels()[t].clone(),
    }
}

fn tiny() -> KeyframeModelConfig {
    KeyframeModelConfig {
        channels: vec![4, 4, 6, 8],
        dim: 8,
        layers: 1,
        heads: 2,
        classes: 3,
        audio_dim: 4,
    }
}

fn tiny_item(seed: u64) -> KeyframeItem<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = Frame::new(8, 8, (0..8 * 8 * 3).map(|_| rng.gen()).collect()).unwrap();
    let mask = LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..3)).collect()).unwrap();
    KeyframeItem {
        video_id: "tiny".into(),
        frame_index: 0,
        frame,
        audio_row: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        mask,
    }
}

#[test]
fn gradients_match_central_differences() {
    let train = KeyframeTrainConfig::default();
    let net = KeyframeNet::<f64>::new(tiny(), 3).unwrap();
    let it = tiny_item(4);
    let (_, grads) = net.loss_and_grads(&it, &train);
    let ids: Vec<ParamId> = net.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-6;
    for _ in 0..20 {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..net.params.tensor(id).len());
        let mut plus = net.clone();
        plus.params.tensor_mut(id).data_mut()[j] += eps;
        let mut minus = net.clone();
        minus.params.tensor_mut(id).data_mut()[j] -= eps;
        let numeric = (plus.loss(&it, &train) - minus.loss(&it, &train)) / (2.0 * eps);
        let analytic = grads.get(id).data()[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "{}[{j}]: analytic {analytic} numeric {numeric} rel {rel}", net.params.name(id));
    }
}

#[test]
fn one_step_is_finite() {
    let train = KeyframeTrainConfig::default();
    let mut net = KeyframeNet::<f64>::new(tiny(), 3).unwrap();
    let (loss, grads) = net.loss_and_grads(&tiny_item(1), &train);
    assert!(loss.is_finite() && grads.all_finite());
    let rep = net.fit(&[tiny_item(1)], 1, 1e-4, &train).unwrap();
    assert!(rep.losses[0].is_finite());
    assert!(net.params.all_finite());
}

#[test]
fn same_seed_gives_identical_weights() {
    let train = KeyframeTrainConfig { batch_size: 2, seed: 9, ..Default::default() };
    let items: Vec<_> = (0..3).map(tiny_item).collect();
    let run = || {
        let mut net = KeyframeNet::<f64>::new(tiny(), 7).unwrap();
        net.fit(&items, 5, 1e-3, &train).unwrap();
        net.params.to_map()
    };
    let (a, b) = (run(), run());
    for (k, t) in &a {
        assert_eq!(t.data(), b[k].data(), "{k}");
    }
}

#[test]
fn ids_beyond_the_class_count_are_rejected() {
    let mut it = tiny_item(1);
    it.mask.data[0] = 5;
    let mut net = KeyframeNet::<f64>::new(tiny(), 3).unwrap();
    assert!(matches!(net.fit(&[it], 1, 1e-4, &KeyframeTrainConfig::default()), Err(Error::InvalidInput(_))));
}

#[test]
fn diverging_run_reports_the_step() {
    let mut net = KeyframeNet::<f64>::new(tiny(), 3).unwrap();
    let mut it = tiny_item(1);
    it.audio_row[0] = f64::MAX;
    match net.fit(&[it], 3, 1e-4, &KeyframeTrainConfig::default()) {
        Err(Error::Diverged { step, batch, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(batch, vec!["tiny#0".to_string()]);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn class_relabelling_permutes_predictions() {
    let train = KeyframeTrainConfig { batch_size: 2, ..Default::default() };
    let items: Vec<_> = (0..3).map(tiny_item).collect();
    let perm = [0usize, 2, 1];
    let permuted: Vec<_> = items
        .iter()
        .map(|it| {
            let mut p = it.clone();
            p.mask.data.iter_mut().for_each(|v| *v = perm[*v as usize] as u16);
            p
        })
        .collect();
    let mut a = KeyframeNet::<f64>::new(tiny(), 11).unwrap();
    a.fit(&items, 20, 1e-3, &train).unwrap();
    let mut b = KeyframeNet::<f64>::new(tiny(), 11).unwrap();
    b.permute_classes(&perm).unwrap();
    b.fit(&permuted, 20, 1e-3, &train).unwrap();
    let probe = tiny_item(42);
    let pa = a.predict(&probe.frame, &probe.audio_row).unwrap();
    let pb = b.predict(&probe.frame, &probe.audio_row).unwrap();
    for (ra, rb) in pa.probs.chunks(3).zip(pb.probs.chunks(3)) {
        for c in 0..3 {
            assert!((ra[c] - rb[perm[c]]).abs() < 1e-8);
        }
    }
    let remapped: Vec<u16> = pa.mask.data.iter().map(|&v| perm[v as usize] as u16).collect();
    assert_eq!(remapped, pb.mask.data);
}

fn small_model() -> KeyframeModelConfig {
    KeyframeModelConfig {
        channels: vec![12, 16, 32, 64],
        dim: 32,
        ..Default::default()
    }
}

#[test]
fn swapping_audio_changes_the_sounding_set() {
    let cfg = CorpusConfig {
        change_scenes: Some(1),
        change_kinds: vec![ChangeKind::Handoff],
        min_objects: 2,
        max_objects: 2,
        ..Default::default()
    };
    let g = &scenes(1, &cfg, 21)[0];
    let items: Vec<_> = (0..g.clip.len()).map(|t| item(g, t)).collect();
    let train = KeyframeTrainConfig { lr: 1e-3, ..Default::default() };
    let mut net = KeyframeNet::<f64>::new(small_model(), 0).unwrap();
    net.fit(&items, 150, train.lr, &train).unwrap();

    let ids = |m: &LabelMap| -> BTreeSet<u16> { m.object_ids() };
    let first = &items[0];
    let last = items.last().unwrap();
    assert_ne!(ids(&first.mask), ids(&last.mask));
    let own = net.predict(&first.frame, &first.audio_row).unwrap();
    let swapped = net.predict(&first.frame, &last.audio_row).unwrap();
    assert_eq!(ids(&own.mask), ids(&first.mask));
    assert_ne!(ids(&own.mask), ids(&swapped.mask));
}

fn write_corpus(dir: &std::path::Path, n: usize, seed: u64) {
    for g in scenes(n, &CorpusConfig::default(), seed) {
        save_sample(dir, &g.clip, &g.audio, Some(&g.masks), Some(&g.annotation())).unwrap();
    }
}

#[test]
fn finetune_contracts() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 3, 8);
    let config = KeyframeConfig {
        model: small_model(),
        train: KeyframeTrainConfig { steps: 20, finetune_steps: 0, ..Default::default() },
    };
    let (ckpt, report) = train_keyframe::<f64>(dir.path(), &config).unwrap();
    assert_eq!(report.losses.len(), 20);
    let subset: KeyframeSubset<f64> = build_keyframe_subset(dir.path()).unwrap();

    // zero steps leave the weights alone
    let (same, _) = finetune_keyframe(&ckpt, &subset, &config).unwrap();
    assert_eq!(same.weights, ckpt.weights);
    assert_eq!(same.meta.lineage.len(), 2);

    // fine-tuning does not raise the subset loss
    let tune = KeyframeConfig {
        train: KeyframeTrainConfig { finetune_steps: 30, finetune_lr: 1e-4, ..config.train.clone() },
        ..config.clone()
    };
    let before = KeyframeNet::from_checkpoint(&ckpt).unwrap().mean_loss(&subset.items, &tune.train);
    let (tuned, _) = finetune_keyframe(&ckpt, &subset, &tune).unwrap();
    let after = KeyframeNet::from_checkpoint(&tuned).unwrap().mean_loss(&subset.items, &tune.train);
    assert!(after <= before, "subset loss rose from {before} to {after}");

    let other = KeyframeConfig {
        model: KeyframeModelConfig { dim: 16, ..small_model() },
        ..config.clone()
    };
    assert!(matches!(finetune_keyframe(&ckpt, &subset, &other), Err(Error::Config(_))));
    let empty = KeyframeSubset::<f64> { items: vec![] };
    assert!(finetune_keyframe(&ckpt, &empty, &config).is_err());
}

#[test]
fn checkpoint_file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let net = KeyframeNet::<f64>::new(tiny(), 13).unwrap();
    let path = dir.path().join("k.ckpt");
    net.to_checkpoint(&KeyframeTrainConfig::default(), TrainingMeta::default())
        .unwrap()
        .save(&path)
        .unwrap();
    let back = KeyframeNet::from_checkpoint(&coprop_core::checkpoint::Checkpoint::load(&path).unwrap()).unwrap();
    let it = tiny_item(2);
    let a = net.predict(&it.frame, &it.audio_row).unwrap().probs;
    let b = back.predict(&it.frame, &it.audio_row).unwrap().probs;
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
