use std::collections::BTreeSet;

use coprop_core::checkpoint::{Checkpoint, TrainingMeta};
use coprop_core::dataset::save_sample;
use coprop_core::error::Error;
use coprop_core::metrics::jaccard;
use coprop_core::nn::{Graph, ParamId, ParamSet, Tensor};
use coprop_core::propagator::{
    assign_identities, audio_insert, propagate_subclip, train_propagator, training_subclips, AudioInsertBlock, MemoryBank,
    MemoryEntry, PropagatorConfig, PropagatorModelConfig, PropagatorNet, PropagatorTrainConfig, SubClipItem,
};
use coprop_core::synth::{corpus_specs, generate_scene, ChangeKind, CorpusConfig, GeneratedScene};
use coprop_core::types::{AudioFeatures, Frame, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenes(n: usize, cfg: &CorpusConfig, seed: u64) -> Vec<GeneratedScene<f64>> {
    corpus_specs(n, cfg, seed).unwrap().iter().map(|s| generate_scene(s).unwrap()).collect()
}

fn tiny() -> PropagatorModelConfig {
    PropagatorModelConfig {
        channels: vec![4],
        insert_levels: vec![0],
        audio_dim: 8,
        audio_tokens: 2,
        insert_head_dim: 4,
        dim: 8,
        heads: 1,
        blocks: 1,
        identities: 4,
        window: 1,
        memory_stride: 1,
        memory_capacity: 3,
        audio_identity: true,
    }
}

fn random_clip(seed: u64, frames: usize, dim: usize) -> (Vec<Frame>, AudioFeatures<f64>, Vec<LabelMap>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = (0..frames)
        .map(|_| Frame::new(8, 8, (0..8 * 8 * 3).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    let a = AudioFeatures::new(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let m = (0..frames)
        .map(|_| LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..3)).collect()).unwrap())
        .collect();
    (f, a, m)
}

fn set(ps: &mut ParamSet<f64>, id: ParamId, values: &[f64]) {
    ps.tensor_mut(id).data_mut().copy_from_slice(values);
}

#[test]
fn insertion_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::<f64>::new();
    let block = AudioInsertBlock::new(&mut ps, "b", 2, 4, 2, 2, &mut rng);
    set(&mut ps, block.query, &[1.0, 0.0, 0.0, 1.0]);
    set(&mut ps, block.key, &[1.0, 0.0, 0.0, 1.0]);
    set(&mut ps, block.value, &[1.0, 0.0, 0.0, 1.0]);
    set(&mut ps, block.output, &[2.0, 0.0, 0.0, 2.0]);
    // four positions, two channels
    let f = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    let audio = [1.0, 0.0, 0.0, 1.0];
    let out = audio_insert(&f, &audio, &block, &ps).unwrap();

    // Q = F, K = V = A = I2, scores = F / sqrt(2)
    let s = 1.0 / 2f64.sqrt();
    let soft = |a: f64, b: f64| {
        let (ea, eb) = (a.exp(), b.exp());
        [ea / (ea + eb), eb / (ea + eb)]
    };
    let rows = [soft(s, 0.0), soft(0.0, s), [0.5, 0.5], [0.5, 0.5]];
    for (p, r) in rows.iter().enumerate() {
        for c in 0..2 {
            let expected = f.row(p)[c] + 2.0 * r[c];
            assert!((out.row(p)[c] - expected).abs() < 1e-12, "({p},{c}): {} vs {expected}", out.row(p)[c]);
        }
    }
}

#[test]
fn single_sub_token_attends_with_weight_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::<f64>::new();
    let block = AudioInsertBlock::new(&mut ps, "b", 3, 4, 1, 2, &mut rng);
    set(&mut ps, block.output, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let f = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect());
    let audio = [0.5, -1.0, 2.0, 0.25];
    let out = audio_insert(&f, &audio, &block, &ps).unwrap();
    let wv = ps.tensor(block.value);
    for c in 0..3 {
        let v: f64 = (0..4).map(|j| audio[j] * wv.data()[j * 3 + c]).sum();
        for p in 0..2 {
            assert!((out.row(p)[c] - f.row(p)[c] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_projection_is_identity_and_attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::<f64>::new();
    let block = AudioInsertBlock::new(&mut ps, "b", 3, 8, 4, 5, &mut rng);
    let f = Tensor::from_vec(&[6, 3], (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let audio: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let out = audio_insert(&f, &audio, &block, &ps).unwrap();
    assert!(out.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let av = g.input(Tensor::from_vec(&[4, 2], audio.clone()));
    block.forward(&mut g, &ps, fv, av);
    let maps: Vec<_> = g.attention_maps().collect();
    assert_eq!(maps.len(), 1);
    for r in 0..6 {
        let sum: f64 = maps[0].row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn insertion_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::<f64>::new();
    let block = AudioInsertBlock::new(&mut ps, "b", 2, 4, 2, 2, &mut rng);
    let f = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]);
    assert!(audio_insert(&f, &[1.0, 2.0, 3.0], &block, &ps).is_err());
    let wide = Tensor::from_vec(&[1, 3], vec![0.0; 3]);
    assert!(audio_insert(&wide, &[0.0; 4], &block, &ps).is_err());
}

#[test]
fn identity_grid_structure() {
    let net = PropagatorNet::<f64>::new(tiny(), 4).unwrap();
    let audio = [0.3; 8];
    let rows = |t: &Tensor<f64>| -> BTreeSet<Vec<u64>> { (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.to_bits()).collect()).collect() };

    let (_, bg) = assign_identities(&net, &LabelMap::background(8, 8), &audio).unwrap();
    assert_eq!(rows(&bg).len(), 1);

    let two = LabelMap::new(8, 8, (0..64).map(|i| [0, 2, 5][i % 3]).collect()).unwrap();
    let (slots, grid) = assign_identities(&net, &two, &audio).unwrap();
    assert_eq!(slots.objects(), &[2, 5]);
    assert_eq!(rows(&grid).len(), 3);
    // zero-initialised audio projection leaves pure slot vectors
    let ids = net.params.tensor(net.identity_vectors());
    for (p, &v) in two.data.iter().enumerate() {
        assert_eq!(grid.row(p), ids.row(slots.slot_of(v).unwrap()));
    }

    let crowded = LabelMap::new(8, 8, (0..64).map(|i| (i % 5) as u16).collect()).unwrap();
    assert!(matches!(assign_identities(&net, &crowded, &audio), Err(Error::Capacity(_))));
}

#[test]
fn audio_term_marks_objects_only() {
    let mut net = PropagatorNet::<f64>::new(tiny(), 4).unwrap();
    let w = net.identity_audio().weight;
    net.params.tensor_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.1);
    let mask = LabelMap::new(8, 8, (0..64).map(|i| (i % 2) as u16).collect()).unwrap();
    let (_, a) = assign_identities(&net, &mask, &[1.0; 8]).unwrap();
    let (_, b) = assign_identities(&net, &mask, &[-1.0; 8]).unwrap();
    assert_eq!(a.row(0), b.row(0));
    assert_ne!(a.row(1), b.row(1));
}

#[test]
fn memory_keeps_keyframe_and_recent_strided_frames() {
    let mut g = Graph::<f64>::new();
    let mut entry = |frame| {
        let v = g.input(Tensor::zeros(&[1, 1]));
        MemoryEntry { frame, key: v, value: v }
    };
    let mut bank = MemoryBank::new(entry(0), 1, 2);
    for t in 1..=5 {
        bank.push(entry(t));
        assert_eq!(bank.long_term_frames()[0], 0);
        assert!(bank.long_term_frames().len() <= 2);
    }
    assert_eq!(bank.long_term_frames(), vec![0, 4]);
    assert_eq!(bank.short_term_frame(), 5);

    let mut bank = MemoryBank::new(entry(0), 2, 3);
    for t in 1..=9 {
        bank.push(entry(t));
    }
    assert_eq!(bank.long_term_frames(), vec![0, 6, 8]);
}

#[test]
fn keyframe_stays_pinned_during_propagation() {
    let net = PropagatorNet::<f64>::new(tiny(), 5).unwrap();
    let (f, a, m) = random_clip(3, 7, 8);
    let mut session = net.session(&f[0], a.row(0), &m[0]).unwrap();
    for t in 1..7 {
        session.step(&f[t], a.row(t)).unwrap();
        let frames = session.memory().long_term_frames();
        assert_eq!(frames[0], 0);
        assert!(frames.len() <= 3);
    }
    assert!(session.attention_maps().all(|m| (0..m.rows()).all(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12)));
}

#[test]
fn audio_free_path_matches_at_init() {
    let config = PropagatorModelConfig {
        channels: vec![6, 8, 12, 16],
        dim: 16,
        ..Default::default()
    };
    let net = PropagatorNet::<f64>::new(config, 9).unwrap();
    let mut plain = net.clone();
    plain.audio_enabled = false;
    let g = &scenes(1, &CorpusConfig::default(), 1)[0];
    let frames = g.clip.frames();
    let kf = &g.masks.labels()[0];
    let mut a = net.session(&frames[0], g.audio.row(0), kf).unwrap();
    let mut b = plain.session(&frames[0], g.audio.row(0), kf).unwrap();
    for t in 1..frames.len() {
        let x = a.step(&frames[t], g.audio.row(t)).unwrap();
        let y = b.step(&frames[t], g.audio.row(t)).unwrap();
        assert!(x.embedding.iter().zip(&y.embedding).all(|(p, q)| p.to_bits() == q.to_bits()), "frame {t}");
        assert!(x.probs.iter().zip(&y.probs).all(|(p, q)| p.to_bits() == q.to_bits()), "frame {t}");
        assert_eq!(x.mask, y.mask);
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut net = PropagatorNet::<f64>::new(tiny(), 3).unwrap();
    // move zero-initialised parameters off zero so their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<ParamId> = net.params.ids().collect();
    for &id in &ids {
        for v in net.params.tensor_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let (f, a, m) = random_clip(6, 4, 8);
    let (_, grads) = net.subclip_loss_and_grads(&f, &a, &m).unwrap().unwrap();
    let eps = 1e-6;
    for k in 0..30 {
        let id = if k < ids.len() { ids[k] } else { ids[rng.gen_range(0..ids.len())] };
        let j = rng.gen_range(0..net.params.tensor(id).len());
        let loss_at = |delta: f64| {
            let mut n = net.clone();
            n.params.tensor_mut(id).data_mut()[j] += delta;
            n.subclip_loss_value(&f, &a, &m).unwrap().unwrap()
        };
        let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        let analytic = grads.get(id).data()[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        // key biases shift every score in a row equally, so their gradient is zero
        let ok = rel < 1e-4 || (analytic - numeric).abs() < 1e-8;
        assert!(ok, "{}[{j}]: analytic {analytic} numeric {numeric} rel {rel}", net.params.name(id));
    }
}

fn handoff_items(seed: u64) -> Vec<SubClipItem<f64>> {
    let cfg = CorpusConfig {
        change_scenes: Some(1),
        change_kinds: vec![ChangeKind::Handoff],
        ..Default::default()
    };
    let g = &scenes(1, &cfg, seed)[0];
    g.annotation()
        .control_points
        .subclips()
        .into_iter()
        .map(|sc| SubClipItem {
            video_id: g.clip.video_id.clone(),
            start: sc.start,
            frames: g.clip.frames()[sc.frames()].to_vec(),
            audio: g.audio.slice(sc.start, sc.end),
            masks: g.masks.labels()[sc.frames()].to_vec(),
        })
        .collect()
}

#[test]
fn single_and_all_level_insertion_differ_after_training() {
    let base = PropagatorModelConfig {
        channels: vec![6, 8, 12, 16],
        dim: 16,
        ..Default::default()
    };
    let mut all = PropagatorNet::<f64>::new(base.clone(), 2).unwrap();
    let mut one = PropagatorNet::<f64>::new(base.single_insert(), 2).unwrap();
    assert!(all.insert_block(0).is_some() && one.insert_block(0).is_none());
    assert!(one.insert_block(3).is_some());
    assert!(all.num_weights() > one.num_weights());

    let items = handoff_items(3);
    let train = PropagatorTrainConfig { steps: 10, lr: 1e-3, ..Default::default() };
    all.fit(&items, &train).unwrap();
    one.fit(&items, &train).unwrap();
    let it = &items[0];
    let probs = |n: &PropagatorNet<f64>| n.session(&it.frames[0], it.audio.row(0), &it.masks[0]).unwrap().step(&it.frames[1], it.audio.row(1)).unwrap().probs;
    assert_ne!(probs(&all), probs(&one));
}

#[test]
fn one_step_is_finite_and_seeded_runs_agree() {
    let items = handoff_items(4);
    let config = PropagatorModelConfig { channels: vec![6, 8, 12, 16], dim: 16, ..Default::default() };
    let net = PropagatorNet::<f64>::new(config.clone(), 1).unwrap();
    let it = &items[0];
    let (loss, grads) = net.subclip_loss_and_grads(&it.frames, &it.audio, &it.masks).unwrap().unwrap();
    assert!(loss.is_finite() && grads.all_finite());
    let train = PropagatorTrainConfig { steps: 3, lr: 1e-3, seed: 5, ..Default::default() };
    let run = || {
        let mut n = PropagatorNet::<f64>::new(config.clone(), 1).unwrap();
        n.fit(&items, &train).unwrap();
        n.params.to_map()
    };
    assert_eq!(run(), run());
}

#[test]
fn background_keyframe_stays_background() {
    let net = PropagatorNet::<f64>::new(tiny(), 1).unwrap();
    let (f, a, _) = random_clip(9, 4, 8);
    let bg = LabelMap::background(8, 8);
    let out = propagate_subclip(&net, &bg, &f, &a).unwrap();
    assert!(out.iter().all(|m| *m == bg));
}

#[test]
fn propagation_is_deterministic_and_keeps_the_keyframe() {
    let net = PropagatorNet::<f64>::new(tiny(), 1).unwrap();
    let (f, a, m) = random_clip(2, 5, 8);
    let x = propagate_subclip(&net, &m[0], &f, &a).unwrap();
    let y = propagate_subclip(&net, &m[0], &f, &a).unwrap();
    assert_eq!(x, y);
    assert_eq!(x[0], m[0]);
    let allowed = m[0].object_ids();
    assert!(x.iter().all(|l| l.object_ids().is_subset(&allowed)));
}

#[test]
fn training_reports_divergence_with_the_batch() {
    let mut net = PropagatorNet::<f64>::new(tiny(), 1).unwrap();
    let (frames, audio, masks) = random_clip(2, 3, 8);
    let item = SubClipItem { video_id: "v".into(), start: 0, frames, audio, masks };
    let train = PropagatorTrainConfig { steps: 5, lr: 1e300, ..Default::default() };
    match net.fit(&[item], &train) {
        Err(Error::Diverged { step, batch, .. }) => {
            assert!(step >= 1);
            assert_eq!(batch, vec!["v@0".to_string()]);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn small_model() -> PropagatorModelConfig {
    PropagatorModelConfig {
        channels: vec![12, 16, 32, 64],
        dim: 32,
        ..Default::default()
    }
}

fn mean_normal_jaccard(net: &PropagatorNet<f64>, items: &[SubClipItem<f64>]) -> f64 {
    let mut scores = Vec::new();
    for it in items {
        let pred = propagate_subclip(net, &it.masks[0], &it.frames, &it.audio).unwrap();
        for t in 1..pred.len() {
            scores.push(jaccard(&pred[t], &it.masks[t], Default::default()).unwrap());
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn trains_on_a_small_corpus_and_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        change_scenes: Some(1),
        change_kinds: vec![ChangeKind::Handoff],
        ..Default::default()
    };
    for g in scenes(2, &cfg, 5) {
        save_sample(dir.path(), &g.clip, &g.audio, Some(&g.masks), Some(&g.annotation())).unwrap();
    }
    let items = training_subclips::<f64>(dir.path()).unwrap();
    assert_eq!(items.len(), 3);
    let config = PropagatorConfig {
        model: small_model(),
        train: PropagatorTrainConfig { steps: 300, lr: 1e-3, ..Default::default() },
    };
    let (ckpt, report) = train_propagator::<f64>(dir.path(), &config).unwrap();
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let net = PropagatorNet::from_checkpoint(&ckpt).unwrap();
    let mj = mean_normal_jaccard(&net, &items);
    assert!(mj >= 0.9, "normal-frame jaccard {mj}");

    let path = dir.path().join("p.ckpt");
    ckpt.save(&path).unwrap();
    let back = PropagatorNet::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let it = &items[0];
    assert_eq!(
        propagate_subclip(&back, &it.masks[0], &it.frames, &it.audio).unwrap(),
        propagate_subclip(&net, &it.masks[0], &it.frames, &it.audio).unwrap()
    );

    // silencing normal-frame audio changes some prediction
    let changed = items.iter().any(|it| {
        let silent = it.audio.map_rows(|t, r| if t == 0 { r.to_vec() } else { vec![0.0; r.len()] }).unwrap();
        propagate_subclip(&net, &it.masks[0], &it.frames, &silent).unwrap()
            != propagate_subclip(&net, &it.masks[0], &it.frames, &it.audio).unwrap()
    });
    assert!(changed);

    assert!(matches!(
        PropagatorNet::<f64>::from_checkpoint(&Checkpoint {
            kind: "keyframe".into(),
            config: serde_json::Value::Null,
            meta: TrainingMeta::default(),
            weights: Default::default()
        }),
        Err(Error::Checkpoint(_))
    ));
}
