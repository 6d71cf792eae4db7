use std::sync::Arc;

use atomnas::data::{synthetic_dataset, Preprocess, Subset};
use atomnas::flops::FlopsLedger;
use atomnas::search::{
    l1_proximal_step, maybe_shrink, penalty_value, recalibrate_bn, regularized_loss, search_loop, ImportanceState,
    L1Update, SearchConfig, SearchData,
};
use atomnas::supernet::{Supernet, SupernetConfig};
use atomnas::tensor::{BatchNormState, BnMode, Tape, Tensor};
use atomnas::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One block of width 2 (a single kernel size, expansion 2 on one channel).
fn two_atom_net() -> Supernet {
    let cfg = SupernetConfig {
        input_channels: 1,
        input_size: 4,
        classes: 2,
        stem_channels: 1,
        stem_stride: 1,
        block_channels: vec![2],
        block_strides: vec![1],
        expansion: 2,
        kernel_sizes: vec![3],
    };
    Supernet::build(&cfg, 0).unwrap()
}

fn penalised(net: &Supernet, coefs: &[f64], lambda: f64) -> f64 {
    let mut tape = Tape::new();
    let task = tape.input(Tensor::scalar(0.0));
    let (loss, _) = regularized_loss(&mut tape, task, net, coefs, lambda).unwrap();
    tape.value(loss).unwrap().item() as f64
}

#[test]
fn regularized_loss_arithmetic() {
    let mut net = two_atom_net();
    net.set_importance(0, 1.0, 0.0).unwrap();
    net.set_importance(1, -2.0, 0.0).unwrap();
    assert!((penalised(&net, &[0.5, 0.5], 1.0) - 1.5).abs() < 1e-6);
    net.set_importance(1, -2.0, 0.25).unwrap();
    assert!((penalised(&net, &[0.5, 0.5], 1.0) - 1.625).abs() < 1e-6);
}

#[test]
fn zero_lambda_returns_the_task_loss() {
    let net = two_atom_net();
    let mut tape = Tape::new();
    let task = tape.input(Tensor::scalar(0.7));
    let (loss, pen) = regularized_loss(&mut tape, task, &net, &[0.5, 0.5], 0.0).unwrap();
    assert_eq!(loss, task);
    assert_eq!(pen, 0.0);
}

#[test]
fn penalty_value_matches_the_taped_penalty() {
    let mut net = two_atom_net();
    net.set_importance(0, 0.3, -0.1).unwrap();
    net.set_importance(1, -2.0, 0.25).unwrap();
    let want = penalised(&net, &[0.2, 0.8], 1.5);
    assert!((penalty_value(&net, &[0.2, 0.8], 1.5).unwrap() - want).abs() < 1e-6);
}

#[test]
fn proximal_step_soft_thresholds() {
    let mut net = two_atom_net();
    net.set_importance(0, 0.375, -0.0625).unwrap();
    net.set_importance(1, -2.0, 0.375).unwrap();
    // thresholds lr·λ·c = 0.125·2·(0.5, 1.0) = (0.125, 0.25)
    let step = |net: &mut Supernet| l1_proximal_step(net, &[0.5, 1.0], 2.0, 0.125).unwrap();
    step(&mut net);
    assert_eq!(net.importance(0).unwrap(), (0.25, 0.0));
    assert_eq!(net.importance(1).unwrap(), (-1.75, 0.125));
    step(&mut net);
    step(&mut net);
    assert_eq!(net.importance(0).unwrap(), (0.0, 0.0));
    assert_eq!(net.importance(1).unwrap(), (-1.25, 0.0));
    assert!(l1_proximal_step(&mut net, &[0.5], 2.0, 0.125).is_err());
}

#[test]
fn missing_cost_is_a_consistency_error() {
    let net = two_atom_net();
    let mut tape = Tape::new();
    let task = tape.input(Tensor::scalar(0.0));
    let r = regularized_loss(&mut tape, task, &net, &[0.5], 1.0);
    assert!(matches!(r, Err(Error::Consistency(_))));
}

#[test]
fn penalty_gradient_is_weighted_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut net = two_atom_net();
        let gammas: [f64; 2] = [rng.random_range(0.1..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }, rng.random_range(-2.0..-0.1)];
        let offsets: [f64; 2] = [rng.random_range(0.1..1.0), rng.random_range(-1.0..-0.1)];
        for a in 0..2 {
            net.set_importance(a, gammas[a] as f32, offsets[a] as f32).unwrap();
        }
        let coefs = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        let lambda = rng.random_range(0.1..3.0);

        let mut tape = Tape::new();
        let task = tape.input(Tensor::scalar(0.0));
        let (loss, _) = regularized_loss(&mut tape, task, &net, &coefs, lambda).unwrap();
        tape.backward(loss, net.params_mut()).unwrap();
        let block = net.block(0);
        let g = net.params().get(block.gamma_id()).grad.data().to_vec();
        let b = net.params().get(block.beta_id()).grad.data().to_vec();
        for a in 0..2 {
            let expect_g = lambda * coefs[a] * gammas[a].signum();
            let expect_b = lambda * coefs[a] * offsets[a].signum();
            assert!((g[a] as f64 - expect_g).abs() < 1e-5, "{} vs {expect_g}", g[a]);
            assert!((b[a] as f64 - expect_b).abs() < 1e-5);

            let h = 1e-2;
            let (gp, _) = net.importance(a).unwrap();
            net.set_importance(a, gp + h, offsets[a] as f32).unwrap();
            let up = penalised(&net, &coefs, lambda);
            net.set_importance(a, gp - h, offsets[a] as f32).unwrap();
            let down = penalised(&net, &coefs, lambda);
            net.set_importance(a, gp, offsets[a] as f32).unwrap();
            let fd = (up - down) / (2.0 * h as f64);
            let rel = (fd - g[a] as f64).abs() / (g[a] as f64).abs().max(1e-12);
            assert!(rel < 1e-3, "finite difference {fd} vs analytic {}", g[a]);
        }
    }
}

#[test]
fn ema_examples() {
    let net = two_atom_net();
    let mut st = ImportanceState::new(&net, 0.9, 1e-3);
    assert_eq!(st.get(0).unwrap().ema, 1.0);
    st.update_ema(&[(0, 0.0), (1, 1.0)]).unwrap();
    assert!((st.get(0).unwrap().ema - 0.9).abs() < 1e-12);
    assert_eq!(st.get(1).unwrap().ema, 1.0, "a constant α is a fixed point");

    let mut st = ImportanceState::new(&net, 0.9999, 1e-3);
    for _ in 0..1000 {
        st.update_ema(&[(0, 0.0), (1, 0.0)]).unwrap();
    }
    let e = st.get(0).unwrap().ema;
    assert!((e - 0.9999f64.powi(1000)).abs() < 1e-9);
    assert!((e - 0.9048).abs() < 1e-4, "{e}");
}

#[test]
fn ema_tracks_magnitude_and_stays_in_the_hull() {
    let net = two_atom_net();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut st = ImportanceState::new(&net, 0.95, 1e-3);
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    for _ in 0..500 {
        let v: f32 = rng.random_range(-3.0..3.0);
        lo = lo.min(v.abs() as f64);
        hi = hi.max(v.abs() as f64);
        st.update_ema(&[(0, v), (1, -v)]).unwrap();
        let e = st.get(0).unwrap();
        assert!(e.ema >= lo - 1e-12 && e.ema <= hi + 1e-12);
        assert_eq!(e.alpha, v.abs() as f64);
        assert_eq!(st.get(1).unwrap().ema, e.ema);
    }
}

#[test]
fn ema_key_mismatch_is_a_consistency_error() {
    let net = two_atom_net();
    let mut st = ImportanceState::new(&net, 0.9, 1e-3);
    assert!(matches!(st.update_ema(&[(0, 1.0)]), Err(Error::Consistency(_))));
    assert!(matches!(st.update_ema(&[(0, 1.0), (5, 1.0)]), Err(Error::Consistency(_))));
}

#[test]
fn dead_detection_cases() {
    let net = Supernet::build(&SupernetConfig::default(), 0).unwrap();
    let mut st = ImportanceState::new(&net, 0.998, 1e-3);
    assert!(st.detect_dead().is_empty(), "fresh supernet has no dead blocks");
    st.set(10, 0.0009, 0.0005).unwrap();
    st.set(11, 0.002, 0.0005).unwrap();
    st.set(12, 0.0005, 0.002).unwrap();
    assert_eq!(st.detect_dead(), vec![10]);
}

#[test]
fn dead_detection_spares_the_last_block_without_skip() {
    let net = Supernet::build(&SupernetConfig::default(), 0).unwrap();
    let mut st = ImportanceState::new(&net, 0.998, 1e-3);
    let first: Vec<usize> = net.block(0).atom_indices().to_vec();
    for (i, &a) in first.iter().enumerate() {
        st.set(a, 1e-5 * (i % 7) as f64, 0.0).unwrap();
    }
    let dead = st.detect_dead();
    assert_eq!(dead.len(), first.len() - 1);
    // Largest |α| is 6e-5, first reached at position 6.
    assert!(!dead.contains(&first[6]));
}

/// Desk supernet with BN statistics from a few training-mode passes.
fn warmed_desk_net(rng: &mut ChaCha8Rng) -> Supernet {
    let mut net = Supernet::build(&SupernetConfig::default(), 5).unwrap();
    for _ in 0..3 {
        let x = Tensor::randn([16, 3, 32, 32], 1.0, rng);
        net.predict(x, BnMode::Train).unwrap();
    }
    net
}

#[test]
fn forced_shrink_removes_exactly_the_zeroed_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = warmed_desk_net(&mut rng);
    let ledger = FlopsLedger::new(&net);
    let mut st = ImportanceState::new(&net, 0.998, 1e-3);
    let mut ids: Vec<usize> = (0..net.atoms().len()).collect();
    ids.shuffle(&mut rng);
    let mut chosen = ids[..10].to_vec();
    chosen.sort_unstable();
    for &a in &chosen {
        net.set_importance(a, 0.0, 0.0).unwrap();
        st.set(a, 0.0, 0.0).unwrap();
    }
    let total: u64 = chosen.iter().map(|&a| ledger.cost(a)).sum();
    let probes: Vec<Tensor> = (0..3).map(|_| Tensor::randn([8, 3, 32, 32], 1.0, &mut rng)).collect();
    let before: Vec<Tensor> = probes.iter().map(|x| net.predict(x.clone(), BnMode::Eval).unwrap()).collect();

    assert!(maybe_shrink(&mut net, &ledger, &mut st, total + 1, 0).unwrap().is_none(), "Δ above the dead cost is a no-op");
    assert_eq!(net.alive_count(), 4032);

    let ev = maybe_shrink(&mut net, &ledger, &mut st, total, 3).unwrap().expect("dead cost reaches Δ");
    let mut removed = ev.removed_ids.clone();
    removed.sort_unstable();
    assert_eq!(removed, chosen);
    assert_eq!(ev.epoch, 3);
    assert_eq!(ev.flops_before - ev.flops_after, total);
    assert_eq!(ev.flops_after, ledger.network_flops(&net));
    assert_eq!(net.alive_count(), 4022);
    assert_eq!(st.alive_count(), 4022);
    for (x, b) in probes.iter().zip(&before) {
        let after = net.predict(x.clone(), BnMode::Eval).unwrap();
        let diff = after.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-6 * b.max_abs().max(1.0), "{diff}");
    }
}

#[test]
fn recalibration_errors_on_empty_stream() {
    let mut net = two_atom_net();
    let r = recalibrate_bn(&mut net, Vec::<Tensor>::new(), 10);
    assert!(matches!(r, Err(Error::EmptyStream(_))));
    let r = recalibrate_bn(&mut net, vec![Tensor::zeros([1, 1, 4, 4])], 0);
    assert!(matches!(r, Err(Error::EmptyStream(_))));
}

fn moments(values: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let c = values.len();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let n = values[ch].len() as f64;
        mean[ch] = values[ch].iter().sum::<f64>() / n;
        var[ch] = values[ch].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n;
    }
    (mean, var)
}

fn collect_channels(t: &Tensor, into: &mut [Vec<f64>]) {
    let [n, c, h, w] = t.shape();
    for s in 0..n {
        for ch in 0..c {
            into[ch].extend(t.data()[(s * c + ch) * h * w..][..h * w].iter().map(|&v| v as f64));
        }
    }
}

/// Recalibrated statistics equal an exact two-pass mean/variance of every
/// batch-norm input, where each batch is normalised with its own statistics
/// on the way through (train-style forward).
#[test]
fn recalibration_matches_two_pass_moments() {
    let cfg = SupernetConfig {
        input_channels: 2,
        input_size: 6,
        classes: 3,
        stem_channels: 3,
        stem_stride: 1,
        block_channels: vec![4],
        block_strides: vec![2],
        expansion: 2,
        kernel_sizes: vec![3, 5],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = Supernet::build(&cfg, 2).unwrap();
    let batches: Vec<Tensor> = [5, 7, 4, 9]
        .iter()
        .map(|&n| {
            let mut t = Tensor::randn([n, 2, 6, 6], 1.0, &mut rng);
            t.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.3);
            t
        })
        .collect();

    let ids = net.ordered_param_ids();
    let (stem_w, stem_g, stem_b) = (ids[0], ids[1], ids[2]);
    let block = net.block(0).clone();
    let mut stem_in = vec![Vec::new(); 3];
    let mut block_in = vec![Vec::new(); block.width()];
    for x in &batches {
        let mut tape = Tape::inference();
        let xv = tape.input(x.clone());
        let w = tape.param(net.params(), stem_w);
        let s = tape.conv2d(xv, w, 1).unwrap();
        collect_channels(tape.value(s).unwrap(), &mut stem_in);
        let (g, b) = (tape.param(net.params(), stem_g), tape.param(net.params(), stem_b));
        let mut scratch = BatchNormState::new(3);
        let s = tape.batchnorm(s, g, b, &mut scratch, BnMode::Train).unwrap();
        let s = tape.relu(s).unwrap();
        let e = tape.param(net.params(), block.expand_id());
        let e = tape.pointwise(s, e).unwrap();
        let groups: Vec<_> = block.kernel_groups().iter().map(|&(_, id, _)| tape.param(net.params(), id)).collect();
        let d = tape.depthwise_mixed(e, &groups, 2).unwrap();
        collect_channels(tape.value(d).unwrap(), &mut block_in);
    }

    let used = recalibrate_bn(&mut net, batches.clone(), 1000).unwrap();
    assert_eq!(used, 25);
    let states: Vec<BatchNormState> = net.bn_states().cloned().collect();
    for (state, values) in states.iter().zip([&stem_in, &block_in]) {
        let (mean, var) = moments(values);
        for ch in 0..mean.len() {
            assert!((state.running_mean[ch] as f64 - mean[ch]).abs() <= 1e-5 * (1.0 + mean[ch].abs()));
            assert!((state.running_var[ch] as f64 - var[ch]).abs() <= 1e-5 * (1.0 + var[ch]));
        }
    }

    // A sample cap truncates the stream mid-batch.
    let used = recalibrate_bn(&mut net, batches, 8).unwrap();
    assert_eq!(used, 8);
}

#[test]
fn recalibration_on_a_constant_stream() {
    let cfg = SupernetConfig {
        input_channels: 2,
        input_size: 1,
        classes: 2,
        stem_channels: 3,
        stem_stride: 1,
        block_channels: vec![3],
        block_strides: vec![1],
        expansion: 2,
        kernel_sizes: vec![3],
    };
    let mut net = Supernet::build(&cfg, 1).unwrap();
    let x = Tensor::from_vec([4, 2, 1, 1], vec![0.5, -1.25, 0.5, -1.25, 0.5, -1.25, 0.5, -1.25]).unwrap();
    recalibrate_bn(&mut net, vec![x.clone(), x], 8).unwrap();
    let w = net.params().get(net.stem_conv_id()).value.clone();
    let states: Vec<BatchNormState> = net.bn_states().cloned().collect();
    for (o, &m) in states[0].running_mean.iter().enumerate() {
        // 1×1 input: only the centre tap of the 3×3 stem kernel sees data.
        let expect = 0.5 * w.at(o, 0, 1, 1) - 1.25 * w.at(o, 1, 1, 1);
        assert!((m - expect).abs() < 1e-6, "{m} vs {expect}");
    }
    for s in &states {
        assert!(s.running_var.iter().all(|&v| v.abs() < 1e-10), "{:?}", s.running_var);
    }
}

fn tiny_search(lambda: f64, seed: u64) -> (SearchData, SupernetConfig, SearchConfig) {
    let net_cfg = SupernetConfig {
        input_channels: 1,
        input_size: 12,
        classes: 4,
        stem_channels: 4,
        stem_stride: 2,
        block_channels: vec![6, 8],
        block_strides: vec![1, 2],
        expansion: 3,
        kernel_sizes: vec![3, 5, 7],
    };
    let data = Arc::new(synthetic_dataset(400, 4, (12, 12), seed).unwrap());
    let train = Subset {
        data: data.clone(),
        indices: (0..320).collect(),
    };
    let val = Subset {
        data,
        indices: (320..400).collect(),
    };
    let pre = Preprocess::fit(&train, 12, 1);
    let cfg = SearchConfig {
        lambda,
        warmup_epochs: 1.0,
        beta: 0.8,
        delta_fraction: 0.01,
        epochs: 8,
        batch_size: 32,
        lr: 0.05,
        seed,
        bn_recalib_samples: 128,
        flip: false,
        eval_batch_size: 40,
        ..SearchConfig::default()
    };
    (SearchData { train, val, pre }, net_cfg, cfg)
}

#[test]
fn zero_lambda_never_kills_a_block() {
    let (data, net_cfg, cfg) = tiny_search(0.0, 1);
    let net = Supernet::build(&net_cfg, 1).unwrap();
    let initial = FlopsLedger::new(&net).network_flops(&net);
    let out = search_loop(net, &data, &cfg, &mut |_| {}).unwrap();
    assert!(out.events.is_empty());
    assert!(out.records.iter().all(|r| r.flops == initial && r.penalty == 0.0));
    assert_eq!(out.final_record().flops, out.initial_flops);
}

#[test]
fn shrinking_run_log_is_consistent() {
    let (data, net_cfg, cfg) = tiny_search(40.0, 2);
    let net = Supernet::build(&net_cfg, 2).unwrap();
    let mut seen = 0;
    let out = search_loop(net, &data, &cfg, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, cfg.epochs);
    assert!(!out.events.is_empty(), "λ = 40 must remove blocks on this task");
    let mut prev = out.initial_flops;
    let mut train_macs = 0u128;
    for r in &out.records {
        assert!(r.flops <= prev);
        match &r.shrink {
            Some(ev) => {
                assert_eq!(ev.flops_before, prev);
                assert_eq!(ev.flops_after, r.flops);
                let removed: u64 = ev.removed_ids.iter().map(|&a| out.ledger.cost(a)).sum();
                assert_eq!(ev.flops_before - ev.flops_after, removed);
                assert!(ev.probe_rel_change.unwrap() <= 1e-2, "{:?}", ev.probe_rel_change);
                assert_eq!(ev.accuracy_probe, Some(r.val_acc));
            }
            None => assert_eq!(r.flops, prev),
        }
        assert_eq!(r.alive_total, r.kernel_counts.iter().flatten().sum::<usize>());
        train_macs += prev as u128 * data.train.len() as u128;
        assert_eq!(r.train_macs, train_macs);
        prev = r.flops;
    }
    assert_eq!(out.net.alive_count(), out.final_record().alive_total);
    assert!(out.final_record().train_macs < out.initial_flops as u128 * 320 * cfg.epochs as u128);
    assert!(out.final_record().val_acc_before_recalibration.is_some());
    assert!(out.records[..cfg.epochs - 1].iter().all(|r| r.val_acc_before_recalibration.is_none()));
}

#[test]
fn subgradient_update_trains() {
    let (data, net_cfg, mut cfg) = tiny_search(5.0, 4);
    cfg.l1_update = L1Update::Subgradient;
    cfg.epochs = 3;
    let out = search_loop(Supernet::build(&net_cfg, 4).unwrap(), &data, &cfg, &mut |_| {}).unwrap();
    assert!(out.records.iter().all(|r| r.penalty > 0.0 && r.train_loss.is_finite()));
    assert!(out.final_record().val_acc > 0.5);
}

#[test]
fn search_is_deterministic() {
    let (data, net_cfg, cfg) = tiny_search(10.0, 3);
    let a = search_loop(Supernet::build(&net_cfg, 3).unwrap(), &data, &cfg, &mut |_| {}).unwrap();
    let b = search_loop(Supernet::build(&net_cfg, 3).unwrap(), &data, &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.events, b.events);
    let (mut na, mut nb) = (a.net, b.net);
    let x = data.val.data.image(0).iter().map(|&p| p as f32 / 255.0).collect::<Vec<_>>();
    let x = Tensor::from_vec([1, 1, 12, 12], x).unwrap();
    assert_eq!(na.predict(x.clone(), BnMode::Eval).unwrap(), nb.predict(x, BnMode::Eval).unwrap());
}

#[test]
fn divergence_is_reported() {
    let (data, net_cfg, mut cfg) = tiny_search(0.0, 4);
    cfg.lr = 1e30;
    cfg.epochs = 3;
    cfg.warmup_epochs = 0.0;
    let r = search_loop(Supernet::build(&net_cfg, 4).unwrap(), &data, &cfg, &mut |_| {});
    assert!(matches!(r, Err(Error::Divergence { .. })), "{:?}", r.err());
}
