//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built without the test harness so the lines always reach the output. The
//! seeded toy training behind criteria 7 and 9 dominates the runtime (about
//! half an hour on one core). `MUSA_ACCEPTANCE_STEPS` shortens it while
//! developing; criterion 7 then reports FAIL because the run is not the
//! required length.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::grad::{frozen, param_grads, term_check};
use common::{
    dominance_oracle, edit_distance, eer_oracle, fixtures, gvd_oracle, kmeans_oracle, pearson_oracle, similarity_oracle,
    tiny_model, toy_dataset, toy_manifest,
};
use musa_autograd::Graph;
use musa_core::anonymizer::{anonymize, anonymize_with_codes, conceal};
use musa_core::config::{MusaConfig, TrainingConfig};
use musa_core::data::Manifest;
use musa_core::dsp::{PitchTrack, Waveform};
use musa_core::encoders::{add_speaker, subtract_speaker, FrameRepresentation, SpeakerEmbedding};
use musa_core::metrics::{
    compute_eer, compute_wer, diag_dominance, gvd, pitch_correlation, similarity_matrix, MelStatsEmbedder, SimilarityMatrix,
    SpeakerEmbedder, SpeakerProbe, TrialScore,
};
use musa_core::model::{total_generator_loss, LossTerm, MusaModel, TermValues};
use musa_core::rvq::{semantic_distillation_loss, to_storage, Codebook, EmaSettings, QuantizerBank};
use musa_core::teacher::{synthetic_teacher, train_tokenizer, TokenizerTrainConfig};
use musa_core::trainer::{term_series, train, LossRecord, MEL_LOG, TOTAL_LOG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = (bool, String);

const TRAIN_STEPS: u64 = 2000;
const DETERMINISM_STEPS: u64 = 100;

fn matrix(n: usize, values: Vec<f64>) -> SimilarityMatrix {
    SimilarityMatrix {
        speakers: (0..n).map(|i| format!("s{i}")).collect(),
        values,
    }
}

fn words(rng: &mut ChaCha8Rng, min: usize) -> Vec<String> {
    let n = rng.random_range(min..9);
    (0..n).map(|_| ["a", "b", "c", "d"][rng.random_range(0..4)].to_string()).collect()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    const N: usize = 200;
    // EER, WER, Pearson, similarity, dominance, G_vd.
    let mut worst = [0.0f64; 6];
    let mut gvd_cases = 0;
    for _ in 0..N {
        let m = rng.random_range(2..40);
        let mut trials: Vec<TrialScore> = (0..m)
            .map(|i| TrialScore {
                enroll_id: format!("e{i}"),
                test_id: format!("t{i}"),
                score: rng.random_range(0..12) as f64 * 0.25 - 1.0,
                is_target: rng.random_bool(0.5),
            })
            .collect();
        trials[0].is_target = true;
        trials[1].is_target = false;
        let got = compute_eer(&trials).unwrap();
        let (e, t) = eer_oracle(&trials);
        worst[0] = worst[0].max((got.eer - e).abs()).max((got.threshold - t).abs());

        let r = words(&mut rng, 1);
        let h = words(&mut rng, 0);
        let w = compute_wer(&r, &h).unwrap();
        worst[1] = worst[1].max((w.wer - edit_distance(&r, &h) as f64 / r.len() as f64).abs());

        let frames = rng.random_range(3..60);
        let mut a = PitchTrack {
            f0_hz: (0..frames).map(|_| rng.random_range(50.0..400.0)).collect(),
            voiced: (0..frames).map(|_| rng.random_bool(0.7)).collect(),
            hop_secs: 0.01,
        };
        let mut b = PitchTrack {
            f0_hz: (0..frames).map(|_| rng.random_range(50.0..400.0)).collect(),
            voiced: (0..frames).map(|_| rng.random_bool(0.7)).collect(),
            hop_secs: 0.01,
        };
        for i in 0..2 {
            a.voiced[i] = true;
            b.voiced[i] = true;
        }
        let joint: Vec<usize> = (0..frames).filter(|&i| a.voiced[i] && b.voiced[i]).collect();
        let x: Vec<f64> = joint.iter().map(|&i| a.f0_hz[i]).collect();
        let y: Vec<f64> = joint.iter().map(|&i| b.f0_hz[i]).collect();
        worst[2] = worst[2].max((pitch_correlation(&a, &b).unwrap() - pearson_oracle(&x, &y)).abs());

        let sizes: Vec<usize> = (0..rng.random_range(2..5)).map(|_| rng.random_range(2..5)).collect();
        let speakers: Vec<usize> = sizes.iter().enumerate().flat_map(|(s, &k)| std::iter::repeat_n(s, k)).collect();
        let n_utt = speakers.len();
        let table: Vec<f64> = (0..n_utt * n_utt).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let score = |i: usize, j: usize| table[i * n_utt + j];
        let mut groups = Vec::new();
        let mut next = 0;
        for (s, &k) in sizes.iter().enumerate() {
            groups.push((format!("s{s}"), (next..next + k).collect::<Vec<usize>>()));
            next += k;
        }
        let sm = similarity_matrix(&groups, |i, j| Ok(score(*i, *j))).unwrap();
        let want = similarity_oracle(&speakers, sizes.len(), &score);
        for (g, w) in sm.values.iter().zip(&want) {
            worst[3] = worst[3].max((g - w).abs());
        }

        let n = rng.random_range(2..6);
        let oo = matrix(n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect());
        let aa = matrix(n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect());
        worst[4] = worst[4].max((diag_dominance(&oo).unwrap() - dominance_oracle(&oo)).abs());
        if dominance_oracle(&oo) > 1e-6 && dominance_oracle(&aa) > 1e-6 {
            gvd_cases += 1;
            worst[5] = worst[5].max((gvd(&oo, &aa).unwrap() - gvd_oracle(&oo, &aa)).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst[2] <= 1e-12
        && [0, 1, 3, 4, 5].iter().all(|&i| worst[i] <= 1e-9)
        && gvd_cases >= 100
        && elapsed < Duration::from_secs(10);
    (
        pass,
        format!(
            "{N} instances each ({gvd_cases} for G_vd); max |diff| eer {:.1e}, wer {:.1e}, pearson {:.1e}, similarity {:.1e}, dominance {:.1e}, gvd {:.1e}; {:.2} s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            worst[5],
            elapsed.as_secs_f64()
        ),
    )
}

fn metric_anchors() -> Outcome {
    let m = matrix(3, vec![0.9, 0.2, 0.1, 0.3, 0.8, 0.2, 0.1, 0.1, 0.7]);
    let g = gvd(&m, &m).unwrap();
    let ce = semantic_distillation_loss(&vec![0.3; 1024 * 6], 1024, &[0, 7, 1023, 512, 3, 99]).unwrap();
    let same: Vec<TrialScore> = [0.1, 0.4, 0.4, 0.9, -2.0]
        .iter()
        .flat_map(|&s| {
            [true, false].map(|t| TrialScore {
                enroll_id: "e".into(),
                test_id: "t".into(),
                score: s,
                is_target: t,
            })
        })
        .collect();
    let eer = compute_eer(&same).unwrap().eer;
    let ce_err = (ce - 1024f64.ln()).abs();
    (
        g == 0.0 && ce_err <= 1e-9 && eer == 0.5,
        format!("gvd(M,M) = {g}, uniform CE - ln 1024 = {ce_err:.1e}, EER on identical distributions = {eer}"),
    )
}

fn rvq_laws() -> Outcome {
    let start = Instant::now();
    let (dim, layers, k) = (8, 8, 1024);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gaussian = |n: usize| -> Vec<f64> { (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let rows = gaussian(1000);
    let ema = EmaSettings {
        decay: 0.999,
        epsilon: 1e-5,
        dead_after: 100,
    };
    // Any codebook must satisfy the laws; layer i is drawn at scale 2^-i to
    // mimic shrinking residuals.
    let mut bank = QuantizerBank::new(layers, k, dim, ema);
    for (i, cb) in bank.layers.iter_mut().enumerate() {
        let entries: Vec<f64> = gaussian(k).iter().map(|v| v * 0.5f64.powi(i as i32)).collect();
        *cb = Codebook::from_entries(k, dim, &entries, true).unwrap();
    }
    let out = bank.quantize_rows(&rows).unwrap();

    let telescoping = (0..rows.len())
        .all(|j| out.total[j] + out.final_residual[j] == out.residual_inputs[0][j] && out.residual_inputs[0][j] == to_storage(rows[j]));
    let monotone = (0..out.rows).all(|r| out.residual_energies(r).windows(2).all(|w| w[1] <= w[0]));
    let first = out.residual_energies(0);
    let mean_energy = |m: usize| (0..out.rows).map(|r| out.residual_energies(r)[m]).sum::<f64>() / out.rows as f64;
    let cb = &bank.layers[0];
    let hits = (0..cb.size).all(|c| {
        let o = bank.quantize_rows(cb.entry(c)).unwrap();
        o.codes[0] == [c] && o.final_residual.iter().all(|&v| v == 0.0)
    });
    let elapsed = start.elapsed();
    (
        telescoping && monotone && hits && first.len() == layers + 1 && elapsed < Duration::from_secs(5),
        format!(
            "telescoping exact: {telescoping}; energy non-increasing over {layers} layers on 1000 frames: {monotone} (mean {:.3} -> {:.3}); codeword hits leave zero residual: {hits}; {:.2} s",
            mean_energy(0),
            mean_energy(layers),
            elapsed.as_secs_f64()
        ),
    )
}

fn shape_laws() -> Outcome {
    let model = MusaModel::new(&MusaConfig::toy().model, 2, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = Vec::new();
    for _ in 0..30 {
        let len = rng.random_range(320..16000);
        let w = Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let x = model.encode(&w).unwrap();
        let y = model.decode(&x, &SpeakerEmbedding::new(vec![0.05; x.dim])).unwrap();
        if x.frames != len / 320 || y.len() != 320 * x.frames {
            bad.push(len);
        }
    }
    let mut exact = true;
    for _ in 0..200 {
        let t = rng.random_range(1..50);
        let vals: Vec<f64> = (0..8 * t).map(|_| rng.random_range(-8.0f32..8.0) as f64).collect();
        let x = FrameRepresentation::new(8, t, vals, 320 * t).unwrap();
        let s = SpeakerEmbedding::new((0..8).map(|_| rng.random_range(-8.0f32..8.0) as f64).collect());
        exact &= add_speaker(&subtract_speaker(&x, &s).unwrap(), &s).unwrap() == x;
    }
    (
        bad.is_empty() && exact && model.hop() == 320,
        format!("hop {}; 30 random lengths, mismatches {bad:?}; 200 subtract/add round trips bit-exact: {exact}", model.hop()),
    )
}

fn gradient_checks() -> Outcome {
    let (model, batch) = tiny_model(3);
    let fq = frozen(&model, &batch);
    let params = model.generator.num_scalars();
    let mut pass = params <= 1000;
    let mut parts = Vec::new();
    for term in LossTerm::ALL {
        let (ratio, param, total) = term_check(&model, &batch, &fq, term);
        pass &= ratio <= 1.0 && total > 0.0;
        parts.push(format!("{} {:.2} ({param})", term.name(), ratio));
    }
    (
        pass,
        format!("{params} parameters; worst error / allowance per term: {}", parts.join(", ")),
    )
}

fn mixture_wiring() -> Outcome {
    let w = TrainingConfig::default();
    let total = total_generator_loss(&TermValues::all(1.0), &w).unwrap();
    let (model, batch) = tiny_model(5);
    let cls: Vec<usize> = model
        .generator
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.starts_with("cls"))
        .map(|(i, _)| i)
        .collect();
    let mut no_s = TrainingConfig::default();
    no_s.lambda_s = 0.0;
    let grads_on = param_grads(&model, &batch, &w);
    let grads_off = param_grads(&model, &batch, &no_s);
    let cls_live = cls.iter().any(|&i| grads_on[i].data().iter().any(|&v| v != 0.0));
    let cls_dead = cls.iter().all(|&i| grads_off[i].data().iter().all(|&v| v == 0.0));

    let mut shifted = batch.clone();
    let k = model.bank.codebook_size();
    shifted.tokens.iter_mut().flatten().for_each(|t| *t = (*t + 1) % k);
    let mut no_m = TrainingConfig::default();
    no_m.lambda_m = 0.0;
    let tokens_matter = param_grads(&model, &batch, &w) != param_grads(&model, &shifted, &w);
    let tokens_ignored = param_grads(&model, &batch, &no_m) == param_grads(&model, &shifted, &no_m);

    let g = Graph::new();
    let p = model.generator.bind(&g, false);
    let built: Vec<LossTerm> = model
        .generator_pass(&g, &p, &batch, &no_m, None)
        .unwrap()
        .terms
        .iter()
        .map(|(t, _)| *t)
        .collect();
    let sem_absent = !built.contains(&LossTerm::Semantic);
    (
        total == 49.1 && cls_live && cls_dead && tokens_matter && tokens_ignored && sem_absent,
        format!(
            "unit terms total {total}; lambda_s = 0: classifier gradient zero {cls_dead} (non-zero when on: {cls_live}); lambda_m = 0: semantic term absent {sem_absent}, gradient independent of tokens {tokens_ignored} (dependent when on: {tokens_matter})"
        ),
    )
}

fn anonymizer_invariants(model: &MusaModel) -> Outcome {
    let data = toy_dataset();
    let s = model.embed_speaker(&data.utterances[0].wave).unwrap();
    let zero = conceal(&s, 0.0).unwrap().values().iter().all(|&v| v == 0.0);
    let a = model.analyze(&data.utterances[0].wave).unwrap();
    let reference = anonymize_with_codes(model, &a.codes, &a.s, 0.0).unwrap();
    let identical = data.utterances[1..].iter().all(|u| {
        let other = model.embed_speaker(&u.wave).unwrap();
        anonymize_with_codes(model, &a.codes, &other, 0.0).unwrap().samples() == reference.samples()
    });
    let recon = data
        .utterances
        .iter()
        .all(|u| anonymize(model, &u.wave, 1.0).unwrap().samples() == model.reconstruct(&u.wave).unwrap().samples());
    (
        zero && identical && recon,
        format!(
            "conceal(s, 0) is zero: {zero}; fixed codes bit-identical across 10 speaker vectors at alpha 0: {identical}; alpha 1 equals reconstruction on 10 utterances: {recon}"
        ),
    )
}

fn moving_average(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn training_trend(log: &[LossRecord], steps: u64, elapsed: Duration, repeat: &[LossRecord]) -> Outcome {
    let mel = term_series(log, MEL_LOG);
    let window = 50.min(mel.len());
    let early = moving_average(&mel[..window]);
    let late = moving_average(&mel[mel.len() - window..]);
    let fall = 1.0 - late / early;
    let prefix: Vec<&LossRecord> = log.iter().filter(|r| r.step < DETERMINISM_STEPS).collect();
    let same = prefix.len() == repeat.len() && prefix.iter().zip(repeat).all(|(a, b)| **a == *b);
    let total = term_series(log, TOTAL_LOG);
    (
        steps == TRAIN_STEPS && fall >= 0.5 && elapsed < Duration::from_secs(2 * 3600) && same,
        format!(
            "{steps} steps in {:.1} min; mel term moving average {early:.3} (steps 1-50) -> {late:.3} (last 50), fall {:.1}%; total loss {:.3} -> {:.3}; {DETERMINISM_STEPS}-step rerun identical: {same}",
            elapsed.as_secs_f64() / 60.0,
            100.0 * fall,
            total.first().copied().unwrap_or(f64::NAN),
            total.last().copied().unwrap_or(f64::NAN),
        ),
    )
}

/// Leave-one-out accuracy of a logistic-regression speaker probe.
fn probe_accuracy(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut correct = 0;
    for i in 0..features.len() {
        let (tf, tl): (Vec<Vec<f64>>, Vec<usize>) = features
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (f, l))| (f.clone(), *l))
            .unzip();
        let probe = SpeakerProbe::train(&tf, &tl, 2, 300, 0.1).unwrap();
        if probe.predict(&features[i]).unwrap() == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / features.len() as f64
}

fn privacy_trend(model: &MusaModel) -> Outcome {
    let fixture: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("acceptance").join("probe_threshold.json")).unwrap()).unwrap();
    let min_drop = fixture["min_drop_points"].as_f64().unwrap();
    let data = toy_dataset();
    let labels: Vec<usize> = data.utterances.iter().map(|u| u.speaker).collect();
    let original: Vec<Vec<f64>> = data.utterances.iter().map(|u| MelStatsEmbedder.embed(&u.wave).unwrap()).collect();
    let anonymized: Vec<Vec<f64>> = data
        .utterances
        .iter()
        .map(|u| MelStatsEmbedder.embed(&anonymize(model, &u.wave, 0.0).unwrap()).unwrap())
        .collect();
    let acc_o = 100.0 * probe_accuracy(&original, &labels);
    let acc_a = 100.0 * probe_accuracy(&anonymized, &labels);
    (
        acc_o - acc_a >= min_drop,
        format!(
            "leave-one-out probe accuracy {acc_o:.0}% on originals, {acc_a:.0}% on alpha-0 outputs; drop {:.0} points (needs {min_drop})",
            acc_o - acc_a
        ),
    )
}

fn tokenizer_vs_kmeans() -> Outcome {
    let data = toy_dataset();
    let (train_u, test_u): (Vec<_>, Vec<_>) = data.utterances.iter().partition(|u| !u.id.ends_with('4'));
    let train_f: Vec<_> = train_u.iter().map(|u| synthetic_teacher(&u.wave).unwrap()).collect();
    let held: Vec<f64> = test_u.iter().flat_map(|u| synthetic_teacher(&u.wave).unwrap().values).collect();
    let d = train_f[0].dim;
    let cfg = TokenizerTrainConfig::from_config(&MusaConfig::toy(), d);
    let tok = train_tokenizer(&train_f, &cfg).unwrap();
    let rows: Vec<f64> = train_f.iter().flat_map(|f| f.values.iter().copied()).collect();
    let km = kmeans_oracle(&rows, d, cfg.codebook_size, 4, 17);
    let (t, k) = (tok.mse(&held), km.mse(&held));
    (
        t <= k,
        format!("{} codes, held-out MSE tokenizer {t:.4} vs k-means {k:.4}", cfg.codebook_size),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn toy_run(steps: u64, out: &std::path::Path) -> (musa_core::trainer::Trainer, Duration) {
    let mut c = MusaConfig::toy();
    c.training.total_steps = steps;
    let manifest = Manifest::load(&toy_manifest()).unwrap();
    let start = Instant::now();
    let (trainer, _) = train(c, &manifest, out, None, |r| {
        if let Some(first) = r.first() {
            if (first.step + 1) % 100 == 0 {
                let mel = r.iter().find(|x| x.term == MEL_LOG).map_or(f64::NAN, |x| x.value);
                eprintln!("  step {:>5}  mel {mel:.4}  ({:.0} s)", first.step + 1, start.elapsed().as_secs_f64());
            }
        }
    })
    .unwrap();
    (trainer, start.elapsed())
}

fn main() {
    let steps: u64 = std::env::var("MUSA_ACCEPTANCE_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(TRAIN_STEPS);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "metric oracle equivalence", guarded(metric_oracles)));
    results.push((2, "closed-form metric anchors", guarded(metric_anchors)));
    results.push((3, "RVQ laws", guarded(rvq_laws)));
    results.push((4, "shape and length laws", guarded(shape_laws)));
    results.push((5, "per-term gradient checks", guarded(gradient_checks)));
    results.push((6, "loss mixture and ablation wiring", guarded(mixture_wiring)));
    results.push((10, "tokenizer vs k-means", guarded(tokenizer_vs_kmeans)));

    eprintln!("toy training: {steps} steps on the committed corpus");
    let dir = tempfile::tempdir().unwrap();
    let run = catch_unwind(AssertUnwindSafe(|| {
        let (trainer, elapsed) = toy_run(steps, &dir.path().join("main"));
        let (repeat, _) = toy_run(DETERMINISM_STEPS.min(steps), &dir.path().join("repeat"));
        (trainer, elapsed, repeat.log)
    }));
    match run {
        Ok((trainer, elapsed, repeat)) => {
            let model = &trainer.state.model;
            results.push((7, "toy training trend", guarded(|| training_trend(&trainer.log, steps, elapsed, &repeat))));
            results.push((8, "anonymization invariants", guarded(|| anonymizer_invariants(model))));
            results.push((9, "toy privacy trend", guarded(|| privacy_trend(model))));
        }
        Err(_) => {
            for (id, name) in [(7, "toy training trend"), (8, "anonymization invariants"), (9, "toy privacy trend")] {
                results.push((id, name, (false, "toy training failed".into())));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    println!();
    for (id, name, (pass, detail)) in &results {
        println!("criterion {id:>2} {} {name}: {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}
