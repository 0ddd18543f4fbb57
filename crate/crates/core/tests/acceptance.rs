//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits non-zero if any fails. Pass check numbers as arguments to
//! run a subset: `cargo test --test acceptance -- 4 7`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::process::ExitCode;
use std::time::Instant;

use lamae_core::checkpoint::Checkpoint;
use lamae_core::config::{LabelSet, Mode, ModelConfig, ScheduleConfig, Task, Variant};
use lamae_core::data::icd::{normalize_icd, CodeTable};
use lamae_core::data::study::Split;
use lamae_core::mask::{masked_count, sample_encoder_mask, MaskPlan, TokenCoord};
use lamae_core::metrics::{auroc, confusion, f1_from, f1_score, mae};
use lamae_core::model::{
    assert_mae_equivalence, decode_and_reconstruct, encode_study, latent_fuse, pretrain_loss, reconstruction_loss,
    sample_plan, StudyInput, UnitReconstruction,
};
use lamae_core::optim::lr_at;
use lamae_core::params::{init_params, is_head_param, pretrain_specs, ParamStore, Session, Trainable};
use lamae_core::rng::RngStreams;
use lamae_core::train::{evaluate_params, load_params, predict_split, pretrain_eval_loss, Dataset, Trainer};
use lamae_core::RunConfig;
use lamae_tensor::gradcheck::{central_difference, max_relative_error};
use lamae_tensor::{sigmoid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn desk_input(cfg: &ModelConfig, seed: u64, n: usize) -> Vec<StudyInput<f64>> {
    common::inputs(cfg, &common::studies(n, seed), seed)
}

// 1
fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    let cfg = ModelConfig::desk(Variant::Lamae);
    let params: ParamStore<f64> = init_params(&pretrain_specs(&cfg), 11);
    let input = desk_input(&cfg, 11, 1).remove(0);
    let plan = sample_plan(&cfg, &RngStreams::new(11), 0, &input.study_id).map_err(err)?;
    let loss_of = |p: &ParamStore<f64>| -> f64 {
        let mut s = Session::new(p, Trainable::Nothing);
        let l = pretrain_loss(&mut s, &input, &plan, &cfg).expect("forward");
        s.value(l).item().expect("scalar")
    };
    let mut s = Session::new(&params, Trainable::All);
    s.train = false;
    let loss = pretrain_loss(&mut s, &input, &plan, &cfg).map_err(err)?;
    s.backward(loss).map_err(err)?;
    let grads = s.grads();
    ensure(grads.len() == params.len(), || {
        format!("{} of {} parameters got a gradient", grads.len(), params.len())
    })?;
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    let mut count = 0;
    for (name, value) in &params {
        let numeric = central_difference(
            |x| {
                probe.insert(name.clone(), x.clone());
                loss_of(&probe)
            },
            value,
            H,
        );
        probe.insert(name.clone(), value.clone());
        let e = max_relative_error(&grads[name].to_f64_vec(), &numeric, FLOOR);
        count += value.numel();
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    let msg = format!(
        "{count} scalars in {} tensors, max rel err {:.2e} ({})",
        params.len(),
        worst.0,
        worst.1
    );
    if worst.0 < TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 2
fn masked_only_loss() -> Outcome {
    let cfg = ModelConfig::desk(Variant::Lamae);
    let params: ParamStore<f64> = init_params(&pretrain_specs(&cfg), 5);
    let input = desk_input(&cfg, 5, 1).remove(0);
    let plan = sample_plan(&cfg, &RngStreams::new(5), 0, &input.study_id).map_err(err)?;
    let mut s = Session::new(&params, Trainable::Nothing);
    let batch = encode_study(&mut s, &input, &plan, &cfg).map_err(err)?;
    let fused = latent_fuse(&mut s, batch, &plan, &cfg).map_err(err)?;
    let recon = decode_and_reconstruct(&mut s, &fused, &plan, &cfg).map_err(err)?;
    let preds: Vec<(usize, Vec<TokenCoord>, Tensor<f64>)> = recon
        .iter()
        .map(|u| (u.view, u.positions.clone(), s.value(u.pred).clone()))
        .collect();

    let visible = |c: &TokenCoord| plan.frames[c.view][c.slot].visible.binary_search(&c.patch).is_ok();
    let run = |perturb: bool| -> Result<(f64, Vec<Tensor<f64>>), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut s = Session::new(&params, Trainable::Nothing);
        let mut leaves = Vec::new();
        let mut units = Vec::new();
        for (view, positions, pred) in &preds {
            let mut pred = pred.clone();
            let cols = pred.shape()[1];
            if perturb {
                for (row, c) in positions.iter().enumerate() {
                    if visible(c) {
                        for v in &mut pred.data_mut()[row * cols..(row + 1) * cols] {
                            *v += rng.random_range(-10.0..10.0);
                        }
                    }
                }
            }
            let leaf = s.graph.leaf(pred, true);
            leaves.push(leaf);
            units.push(UnitReconstruction {
                view: *view,
                positions: positions.clone(),
                pred: leaf,
            });
        }
        let loss = reconstruction_loss(&mut s, &input, &units, &plan, &cfg).map_err(err)?;
        s.backward(loss).map_err(err)?;
        let grads = leaves
            .iter()
            .map(|&l| s.graph.grad(l).expect("leaf gradient").clone())
            .collect();
        Ok((s.value(loss).item().map_err(err)?, grads))
    };
    let (base, grads) = run(false)?;
    let (moved, _) = run(true)?;
    ensure(base.to_bits() == moved.to_bits(), || {
        format!("loss moved from {base:e} to {moved:e}")
    })?;
    let mut visible_entries = 0;
    let mut masked_nonzero = 0;
    for ((_, positions, _), g) in preds.iter().zip(&grads) {
        let cols = g.shape()[1];
        for (row, c) in positions.iter().enumerate() {
            let r = &g.data()[row * cols..(row + 1) * cols];
            if visible(c) {
                visible_entries += cols;
                ensure(r.iter().all(|&v| v == 0.0), || {
                    format!("non-zero gradient at visible {c:?}")
                })?;
            } else if r.iter().any(|&v| v != 0.0) {
                masked_nonzero += 1;
            }
        }
    }
    ensure(masked_nonzero > 0, || "no gradient reaches masked positions".into())?;
    Ok(format!(
        "loss bit-identical after perturbing {visible_entries} visible pixels; their gradients are exactly 0"
    ))
}

// 3
fn mae_degeneracy() -> Outcome {
    let mut lines = Vec::new();
    for (la, base) in [
        (Variant::Lamae, Variant::ImageMae),
        (Variant::VideoLamae, Variant::VideoMae),
    ] {
        let mut cfg_la = ModelConfig::desk(la);
        cfg_la.latent.num_layers = 0;
        cfg_la.alpha_la = 0.0;
        cfg_la.identity_embeddings = false;
        let cfg_base = ModelConfig::desk(base);
        for seed in 1..=3 {
            let inputs = desk_input(&cfg_la, seed, 3);
            assert_mae_equivalence(&cfg_la, &cfg_base, seed, &inputs)
                .map_err(|e| format!("{} vs {}, seed {seed}: {e}", la.name(), base.name()))?;
        }
        lines.push(format!("{}={}", la.name(), base.name()));
    }
    Ok(format!("{} over seeds 1-3", lines.join(", ")))
}

// 4
fn latent_equivariance() -> Outcome {
    let mut cfg = ModelConfig::desk(Variant::Lamae);
    cfg.identity_embeddings = false;
    cfg.views_per_study = 4;
    let generator = common::desk_generator(1, LabelSet::Separable);
    let gen = lamae_core::config::GeneratorConfig { views: 4, ..generator };
    let studies = lamae_core::data::synth::generate_dataset(&gen, 3).map_err(err)?;
    let input: StudyInput<f64> = common::inputs(&cfg, &studies, 3).remove(0);
    let params: ParamStore<f64> = init_params(&pretrain_specs(&cfg), 3);
    let plan = sample_plan(&cfg, &RngStreams::new(3), 0, &input.study_id).map_err(err)?;
    let fuse = |input: &StudyInput<f64>, plan: &MaskPlan| -> Result<HashMap<TokenCoord, Vec<u64>>, String> {
        let mut s = Session::new(&params, Trainable::Nothing);
        let batch = encode_study(&mut s, input, plan, &cfg).map_err(err)?;
        let fused = latent_fuse(&mut s, batch, plan, &cfg).map_err(err)?;
        let t = s.value(fused.tokens);
        let d = t.shape()[1];
        Ok(fused
            .coords
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, t.data()[i * d..(i + 1) * d].iter().map(|v| v.to_bits()).collect()))
            .collect())
    };
    let base = fuse(&input, &plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut nontrivial = 0;
    for _ in 0..20 {
        // view j of the permuted study is view perm[j] of the original
        let mut perm: Vec<usize> = (0..cfg.views_per_study).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            nontrivial += 1;
        }
        let mut inv = vec![0; perm.len()];
        for (j, &p) in perm.iter().enumerate() {
            inv[p] = j;
        }
        let mut p_input = input.clone();
        p_input.frames = perm.iter().map(|&p| input.frames[p].clone()).collect();
        let mut p_plan = plan.clone();
        p_plan.frames = perm.iter().map(|&p| plan.frames[p].clone()).collect();
        p_plan.latent_dropped = plan
            .latent_dropped
            .iter()
            .map(|c| TokenCoord {
                view: inv[c.view],
                ..*c
            })
            .collect();
        let out = fuse(&p_input, &p_plan)?;
        ensure(out.len() == base.len(), || "token count changed".into())?;
        for (c, row) in &base {
            let moved = TokenCoord {
                view: inv[c.view],
                ..*c
            };
            ensure(out.get(&moved) == Some(row), || {
                format!("token {c:?} differs under permutation {perm:?}")
            })?;
        }
    }
    Ok(format!(
        "20 view permutations ({nontrivial} non-identity) of {} tokens, f64 bit-equal",
        base.len()
    ))
}

// 5
fn mask_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = sample_encoder_mask(256, 0.875, &mut rng, false, 1).map_err(err)?;
    ensure(
        masked_count(256, 0.875) == 224 && m[0].masked.len() == 224 && m[0].visible.len() == 32,
        || format!("{} masked / {} visible", m[0].masked.len(), m[0].visible.len()),
    )?;
    const DRAWS: usize = 100_000;
    let mut hits = [0usize; 16];
    for _ in 0..DRAWS {
        let m = sample_encoder_mask(16, 0.5, &mut rng, false, 1).map_err(err)?.remove(0);
        ensure(m.is_partition_of(16) && m.masked.len() == 8, || {
            format!("bad partition {m:?}")
        })?;
        for &i in &m.masked {
            hits[i] += 1;
        }
    }
    let freqs: Vec<f64> = hits.iter().map(|&h| h as f64 / DRAWS as f64).collect();
    let worst = freqs.iter().map(|f| (f - 0.5).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.02, || format!("per-index frequency off by {worst:.4}"))?;
    Ok(format!(
        "224/32 at T=256; {DRAWS} partitions valid, max |freq - 0.5| = {worst:.4}"
    ))
}

// 6
fn schedule_values() -> Outcome {
    let s = ScheduleConfig::paper(1600.0);
    let tol = 1e-12 * s.base_lr;
    let mid = s.warmup_epochs + (s.total_epochs - s.warmup_epochs) / 2.0;
    let checks = [
        ("lr(0)", lr_at(0.0, &s), 5e-5),
        ("lr(warmup end)", lr_at(s.warmup_epochs, &s), 1e-4),
        ("lr(decay midpoint)", lr_at(mid, &s), 5e-5),
        (
            "lr(warmup end - 1e-12)",
            lr_at(s.warmup_epochs - 1e-12, &s),
            lr_at(s.warmup_epochs, &s),
        ),
    ];
    for (what, got, want) in checks {
        ensure((got - want).abs() < tol, || {
            format!("{what} = {got:e}, expected {want:e}")
        })?;
    }
    Ok("5e-5 -> 1e-4 at epoch 10 -> 5e-5 at epoch 805, continuous at the boundary".into())
}

fn brute_auroc(s: &[f64], y: &[f64]) -> Option<f64> {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] > 0.5 && y[j] <= 0.5 {
                pairs += 1;
                twice_wins += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| twice_wins as f64 / (2 * pairs) as f64)
}

/// Harmonic mean of precision and recall, reduced to a ratio of integers so
/// the float result is a single correctly rounded division.
fn brute_f1(s: &[f64], y: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&si, &yi) in s.iter().zip(y) {
        let pred = 1.0 / (1.0 + (-si).exp()) >= 0.5;
        match (pred, yi > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    // P = tp/(tp+fp), R = tp/(tp+fn); 2PR/(P+R) = 2tp^2 / (tp(tp+fn) + tp(tp+fp))
    let num = 2 * tp * tp;
    let den = tp * (tp + fn_) + tp * (tp + fp);
    num as f64 / den as f64
}

// 7
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut undefined = 0;
    for col in 0..200 {
        let n = rng.random_range(1..=12);
        // coarse scores force ties
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64 * 0.5).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let (a, b) = (auroc(&s, &y), brute_auroc(&s, &y));
        undefined += usize::from(b.is_none());
        ensure(a == b, || format!("column {col}: auroc {a:?} vs brute force {b:?}"))?;
        let (f, g) = (f1_score(&s, &y, 0.5), brute_f1(&s, &y));
        ensure(f == g, || format!("column {col}: f1 {f} vs brute force {g}"))?;
    }
    ensure(
        auroc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]) == Some(0.75),
        || "ranking example".into(),
    )?;
    let c = confusion(&[1.0, 1.0, 1.0, -1.0, -1.0], &[1.0, 1.0, 0.0, 1.0, 0.0], 0.5);
    ensure(f1_from(c) == 4.0 / 6.0, || format!("F1 example gave {}", f1_from(c)))?;
    ensure(sigmoid(0.0) >= 0.5, || "threshold at zero logit".into())?;
    Ok(format!(
        "200 columns exact ({undefined} single-class), 0.75 and 4/6 examples reproduced"
    ))
}

fn fuzz_code<R: Rng>(rng: &mut R) -> String {
    const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    const NOISE: &[u8] = b" .-_/xI0";
    let mut s = String::new();
    if rng.random_bool(0.8) {
        s.push(ALNUM[rng.random_range(0..52)] as char);
        for _ in 0..2 {
            s.push((b'0' + rng.random_range(0..10)) as char);
        }
        if rng.random_bool(0.5) {
            s.push('.');
        }
        for _ in 0..rng.random_range(0..5) {
            s.push(ALNUM[rng.random_range(0..ALNUM.len())] as char);
        }
    } else {
        for _ in 0..rng.random_range(0..8) {
            let pool = if rng.random_bool(0.5) { ALNUM } else { NOISE };
            s.push(pool[rng.random_range(0..pool.len())] as char);
        }
    }
    if rng.random_bool(0.2) {
        s = format!(" {s} ");
    }
    s
}

// 8
fn icd_pipeline() -> Outcome {
    let table = CodeTable::reference();
    ensure(table.len() == 40, || format!("{} codes", table.len()))?;
    let (first, last) = (&table.entries[0], &table.entries[39]);
    ensure(first.code == "E78" && first.prevalence == 56.11, || {
        format!("first {first:?}")
    })?;
    ensure(last.code == "N40" && last.prevalence == 9.80, || {
        format!("last {last:?}")
    })?;
    ensure(
        table.entries.windows(2).all(|w| w[0].prevalence >= w[1].prevalence),
        || "not sorted".into(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut valid = 0;
    for _ in 0..1000 {
        let code = fuzz_code(&mut rng);
        if let Ok(once) = normalize_icd(&code) {
            valid += 1;
            let twice = normalize_icd(&once).map_err(|e| format!("{code:?} -> {once:?} -> {e}"))?;
            ensure(once == twice, || format!("{code:?}: {once} then {twice}"))?;
        }
    }
    ensure(valid > 100, || format!("only {valid} fuzzed codes parsed"))?;
    Ok(format!(
        "E78 56.11% .. N40 9.80%, 40 codes; idempotent on 1000 fuzzed codes ({valid} valid)"
    ))
}

/// Full-finetuning recipe for the desk overfit run.
fn finetune_cfg(pre: &RunConfig, task: Task) -> RunConfig {
    let mut f = pre.clone();
    f.mode = Mode::FinetuneFull;
    f.task = task;
    f.checkpoint = Some("pretrained".into());
    f.batch_size = 2;
    f.schedule.base_lr = 1e-3;
    f.schedule.warmup_epochs = 5.0;
    f.schedule.total_epochs = 200.0;
    f.optim.weight_decay = 0.05;
    f
}

// 9
fn synthetic_overfit() -> Outcome {
    let clock = Instant::now();
    let mut cfg = RunConfig::preset("desk", Variant::Lamae).map_err(err)?;
    cfg.seed = 1;
    cfg.generator.studies = 32;
    let data = Dataset::synthetic(&cfg).map_err(err)?;
    let all: Vec<usize> = (0..data.studies.len()).collect();
    let mut tr = Trainer::<f32>::with_checkpoint(&cfg, None).map_err(err)?;
    let before = pretrain_eval_loss(&cfg, &tr.params, &data, &all).map_err(err)?;
    tr.run_until(&data, 200, None).map_err(err)?;
    let after = pretrain_eval_loss(&cfg, &tr.params, &data, &all).map_err(err)?;
    let ratio = after / before;
    let ck = tr.checkpoint().map_err(err)?;

    let train = data.split(Split::Train);
    let f = finetune_cfg(&cfg, Task::Multilabel);
    let mut ft = Trainer::<f32>::with_checkpoint(&f, Some(&ck)).map_err(err)?;
    ft.run(&data, None).map_err(err)?;
    let cls = evaluate_params(&f, &ft.params, &data, Split::Train, "finetune_full").map_err(err)?;
    let auc = cls.classification.ok_or("no classification metrics")?.macro_auroc.value;

    let f = finetune_cfg(&cfg, Task::Regression);
    let mut ft = Trainer::<f32>::with_checkpoint(&f, Some(&ck)).map_err(err)?;
    ft.run(&data, None).map_err(err)?;
    let p = predict_split(&f, &ft.params, &data, &train, Task::Regression).map_err(err)?;
    let err_ = mae(&p.preds, &p.targets);
    let secs = clock.elapsed().as_secs_f64();

    let msg = format!(
        "recon loss {after:.4}/{before:.4} = {ratio:.3} after 200 steps; train AUROC {auc:.3}; train MAE {err_:.2}; {secs:.0}s"
    );
    if ratio <= 0.2 && auc >= 0.9 && err_ <= 5.0 && secs < 600.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 10
fn cross_view_advantage() -> Outcome {
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in 1..=3 {
        let mut aucs = Vec::new();
        for variant in [Variant::VideoLamae, Variant::VideoMae] {
            let mut cfg = RunConfig::preset("desk", variant).map_err(err)?;
            cfg.seed = seed;
            cfg.generator.studies = 128;
            cfg.generator.test_fraction = 0.25;
            cfg.generator.label_set = LabelSet::CrossView;
            cfg.model.num_labels = 1;
            let data = Dataset::synthetic(&cfg).map_err(err)?;
            let mut tr = Trainer::<f32>::with_checkpoint(&cfg, None).map_err(err)?;
            tr.run(&data, None).map_err(err)?;
            let ck = tr.checkpoint().map_err(err)?;
            let mut f = cfg.clone();
            f.mode = Mode::FinetuneFrozen;
            f.checkpoint = Some("pretrained".into());
            f.batch_size = 2;
            f.schedule.base_lr = 1e-3;
            let mut ft = Trainer::<f32>::with_checkpoint(&f, Some(&ck)).map_err(err)?;
            ft.run(&data, None).map_err(err)?;
            let r = evaluate_params(&f, &ft.params, &data, Split::Test, "finetune_frozen").map_err(err)?;
            aucs.push(r.classification.ok_or("no classification metrics")?.macro_auroc.value);
        }
        detail.push(format!("{:.3}/{:.3}", aucs[0], aucs[1]));
        gaps.push(aucs[0] - aucs[1]);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let msg = format!(
        "frozen test AUROC Video-LAMAE/VideoMAE per seed {}; mean gap {mean:+.3}",
        detail.join(", ")
    );
    if mean >= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn small_cfg(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::preset("desk", Variant::Lamae).expect("desk preset");
    cfg.seed = 21;
    cfg.dtype = lamae_tensor::DType::F64;
    cfg.generator.studies = 12;
    cfg.batch_size = 4;
    cfg.schedule.total_epochs = 3.0;
    cfg.schedule.warmup_epochs = 1.0;
    cfg.mode = mode;
    cfg
}

fn same_params(a: &ParamStore<f64>, b: &ParamStore<f64>) -> bool {
    a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| v.bit_eq(w)))
}

// 11
fn engineering_contracts() -> Outcome {
    let cfg = small_cfg(Mode::Pretrain);
    let data = Dataset::synthetic(&cfg).map_err(err)?;

    let mut continuous = Trainer::<f64>::with_checkpoint(&cfg, None).map_err(err)?;
    continuous.run(&data, None).map_err(err)?;
    let total = continuous.step;

    let ck = continuous.checkpoint().map_err(err)?;
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).map_err(err)?;
    ensure(back.to_bytes() == bytes && back == ck, || {
        "checkpoint bytes changed on round trip".into()
    })?;
    let restored: ParamStore<f64> = load_params(&back).map_err(err)?;
    ensure(same_params(&restored, &continuous.params), || {
        "parameters changed on round trip".into()
    })?;

    let mut first = Trainer::<f64>::with_checkpoint(&cfg, None).map_err(err)?;
    first.run_until(&data, total / 2, None).map_err(err)?;
    let mid = Checkpoint::from_bytes(&first.checkpoint().map_err(err)?.to_bytes()).map_err(err)?;
    let mut resumed = Trainer::<f64>::with_checkpoint(&cfg, Some(&mid)).map_err(err)?;
    resumed.run(&data, None).map_err(err)?;
    let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&resumed.trace) == bits(&continuous.trace), || {
        "resumed loss trace differs".into()
    })?;
    ensure(same_params(&resumed.params, &continuous.params), || {
        "resumed parameters differ".into()
    })?;

    let mut again = Trainer::<f64>::with_checkpoint(&cfg, None).map_err(err)?;
    again.run(&data, None).map_err(err)?;
    ensure(bits(&again.trace) == bits(&continuous.trace), || {
        "rerun loss trace differs".into()
    })?;
    ensure(same_params(&again.params, &continuous.params), || {
        "rerun parameters differ".into()
    })?;

    let mut f = small_cfg(Mode::FinetuneFrozen);
    f.checkpoint = Some("pretrained".into());
    let mut ft = Trainer::<f64>::with_checkpoint(&f, Some(&ck)).map_err(err)?;
    let start = ft.params.clone();
    ft.run(&data, None).map_err(err)?;
    let mut head_changed = Vec::new();
    for (name, before) in &start {
        let after = &ft.params[name];
        if !is_head_param(name) {
            ensure(before.bit_eq(after), || format!("frozen run changed {name}"))?;
        } else if !before.bit_eq(after) {
            head_changed.push(name.clone());
        }
    }
    ensure(head_changed.iter().any(|n| n.ends_with(".weight")), || {
        "frozen run left the head untouched".into()
    })?;
    let backbone: BTreeMap<_, _> = start.iter().filter(|(k, _)| !is_head_param(k)).collect();
    Ok(format!(
        "round trip bit-exact ({} bytes); resume at step {} of {total} matches continuous trace; reruns identical; frozen run kept {} backbone tensors, moved {} head tensors",
        bytes.len(),
        total / 2,
        backbone.len(),
        head_changed.len()
    ))
}

fn main() -> ExitCode {
    let checks: [Check; 11] = [
        ("gradient correctness", gradient_check),
        ("masked-only loss", masked_only_loss),
        ("latent-attention degeneracy", mae_degeneracy),
        ("latent-attention equivariance", latent_equivariance),
        ("mask arithmetic", mask_arithmetic),
        ("schedule values", schedule_values),
        ("metric oracles", metric_oracles),
        ("ICD pipeline", icd_pipeline),
        ("synthetic overfit", synthetic_overfit),
        ("multi-view advantage", cross_view_advantage),
        ("engineering contracts", engineering_contracts),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {n:>2} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
