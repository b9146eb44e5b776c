mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{OP_CASES, random};
use gaitmff::branches::{
    SkeletalOptions, proportion_branch, skeletal_motion_branch, velocity_branch,
};
use gaitmff::cycle::{CycleConfig, SimilarityWaveform, TroughRule, detect_cycle, estimate_cycle};
use gaitmff::extractor::StageSpec;
use gaitmff::mff::{
    Excitation, FusionConfig, Mff, aggregate_spatial, build_mff, global_feature, joint_descriptor,
    recalibrate,
};
use gaitmff::model::{
    BranchBatch, BranchMask, ModelConfig, ModelError, PROPORTION_CHANNELS, SKELETAL_CHANNELS,
    VELOCITY_CHANNELS, build_model,
};
use gaitmff::pipeline::checkpoint::encode_checkpoint;
use gaitmff::pipeline::{
    AblationPlan, AblationTable, EvalOptions, Protocol, TrainConfig, ablation_suite,
    load_checkpoint, pckh, rank1_eval, save_checkpoint, split_gallery_probe, train,
};
use gaitmff::skeleton::{
    Condition, GaitTensor, Joint, KeypointFrame, NUM_JOINTS, SkeletonTopology,
};
use gaitmff::synth::{
    RenderOptions, SynthConfig, SynthError, generate_dataset, render_sequence, sample_subject,
};
use gaitmff::tensor::gradcheck::{GradCheckConfig, check_param_gradients};
use gaitmff::tensor::{ParamStore, Tape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (usize, &'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    for case in OP_CASES {
        for seed in 0..50 {
            let report = (case.run)(seed).map_err(|e| format!("{} seed {seed}: {e}", case.name))?;
            ensure(report.passes(1e-4), || {
                format!("{} seed {seed}: {report:?}", case.name)
            })?;
            worst = worst.max(report.max_relative_error);
        }
    }
    let config = ModelConfig {
        stem_channels: 4,
        stages: vec![StageSpec::new(1, 4, 1)],
        reduction_ratio: 2,
    };
    let probe = GradCheckConfig {
        max_probes_per_input: 6,
        ..GradCheckConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..50 {
        let mut store = ParamStore::new();
        let model = build_model(
            &config,
            BranchMask::ALL,
            3,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .map_err(|e| e.to_string())?;
        let batch = BranchBatch {
            proportion: random(&[2, PROPORTION_CHANNELS, 10, 16], &mut rng),
            velocity: random(&[2, VELOCITY_CHANNELS, 4, 16], &mut rng),
            skeletal: random(&[2, SKELETAL_CHANNELS, 10, 16], &mut rng),
        };
        let labels = [rng.random_range(0..3), rng.random_range(0..3)];
        let report =
            check_param_gradients(&store, &probe, |tape, binding| -> Result<_, ModelError> {
                let out = model.forward::<f64, ChaCha8Rng>(tape, binding, &batch, None)?;
                Ok(tape.softmax_cross_entropy(out.logits, &labels)?)
            })
            .map_err(|e| format!("model seed {seed}: {e}"))?;
        ensure(report.passes(1e-4), || {
            format!("model seed {seed}: {report:?}")
        })?;
        worst = worst.max(report.max_relative_error);
    }
    Ok(format!(
        "{} ops and the full model over 50 seeds, worst {worst:.2e}",
        OP_CASES.len()
    ))
}

fn cycles() -> Outcome {
    let dipped: Vec<u32> = (0..48u32)
        .map(|t| {
            [12u32, 24, 36]
                .iter()
                .map(|&m| m.abs_diff(t))
                .min()
                .unwrap()
                .min(5)
        })
        .collect();
    let waveform = SimilarityWaveform {
        values: dipped,
        reference_index: 0,
    };
    let est = detect_cycle(&waveform, &TroughRule::new(1, 6)).map_err(|e| e.to_string())?;
    ensure(est.full_cycle_frames == 24, || {
        format!("constructed waveform gave {est:?}")
    })?;

    let topo = SkeletonTopology::mpii();
    let mut weakest = 100;
    for sigma in [0.0, 0.01, 0.02] {
        for period in [16, 20, 24, 32] {
            let mut hits = 0;
            for trial in 0..100u64 {
                let mut params = sample_subject(1000 + trial, period);
                params.period_frames = period;
                let options = RenderOptions {
                    view_deg: 90,
                    condition: Condition::Normal,
                    noise_sigma: sigma,
                    phase_offset: 0.0,
                    noise_seed: trial,
                };
                let seq =
                    render_sequence(&params, 128, &options, "s", "q").map_err(|e| e.to_string())?;
                if let Ok(est) = estimate_cycle(&seq, &topo, &CycleConfig::default()) {
                    hits += usize::from(est.full_cycle_frames.abs_diff(period) <= 1);
                }
            }
            ensure(hits >= 95, || {
                format!("period {period}, sigma {sigma}: {hits}/100")
            })?;
            weakest = weakest.min(hits);
        }
    }
    Ok(format!("12/24/36 gives 24; weakest cell {weakest}/100"))
}

fn branch_oracles() -> Outcome {
    let topo = SkeletonTopology::mpii();
    let eps = SkeletalOptions::default().epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let t = rng.random_range(8..=40);
        let mut data = Tensor::from_fn(&[2, t, 16], |_| rng.random_range(-2.0..2.0));
        // Collapse a few bones onto their parents.
        for _ in 0..rng.random_range(0..4) {
            let (f, i) = (rng.random_range(0..t), rng.random_range(0..16));
            if i != topo.root() {
                for c in 0..2 {
                    let v = data.at(&[c, f, topo.parent(i)]);
                    data.data_mut()[(c * t + f) * 16 + i] = v;
                }
            }
        }
        let x = GaitTensor::new(data).map_err(|e| e.to_string())?;
        let p = proportion_branch(&x, &topo)
            .map_err(|e| e.to_string())?
            .data;
        let v = velocity_branch(&x).map_err(|e| e.to_string())?.data;
        let s = skeletal_motion_branch(&x, &topo, &SkeletalOptions::default())
            .map_err(|e| e.to_string())?
            .data;
        ensure(v.shape() == [4, t - 6, 16], || {
            format!("case {case}: velocity shape {:?}", v.shape())
        })?;
        for c in 0..2 {
            for f in 0..t {
                let center = (x.at(c, f, topo.thorax()) + x.at(c, f, topo.pelvis())) / 2.0;
                for i in 0..16 {
                    ensure(p.at(&[c, f, i]) == x.at(c, f, i) - center, || {
                        format!("case {case}: proportion")
                    })?;
                    ensure(p.at(&[2 + c, f, i]) == x.at(c, f, i), || {
                        format!("case {case}: raw coordinates")
                    })?;
                    if f + 6 < t {
                        ensure(
                            v.at(&[c, f, i]) == x.at(c, f + 6, i) - x.at(c, f, i),
                            || format!("case {case}: long velocity"),
                        )?;
                        ensure(
                            v.at(&[2 + c, f, i]) == x.at(c, f + 1, i) - x.at(c, f, i),
                            || format!("case {case}: short velocity"),
                        )?;
                    }
                }
            }
        }
        for f in 0..t {
            for i in 0..16 {
                let angle = s.at(&[2, f, i]);
                ensure((0.0..=std::f64::consts::PI).contains(&angle), || {
                    format!("case {case}: angle {angle} at frame {f} joint {i}")
                })?;
                if i == topo.root() {
                    ensure((0..3).all(|c| s.at(&[c, f, i]) == 0.0), || {
                        format!("case {case}: root")
                    })?;
                    continue;
                }
                let lx = x.at(0, f, i) - x.at(0, f, topo.parent(i));
                let ly = x.at(1, f, i) - x.at(1, f, topo.parent(i));
                let want = (ly / (lx * lx + ly * ly + eps * eps).sqrt())
                    .clamp(-1.0, 1.0)
                    .acos();
                ensure(s.at(&[0, f, i]) == lx && s.at(&[1, f, i]) == ly, || {
                    format!("case {case}: bone vector")
                })?;
                ensure(angle == want, || {
                    format!("case {case}: angle {angle} vs {want}")
                })?;
            }
        }
    }
    Ok("100 tensors bit-exact, angles in [0, π]".into())
}

fn fusion_invariants() -> Outcome {
    let random4 = |shape: &[usize], seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random(shape, &mut rng)
    };
    let build = |config: &FusionConfig, seed: u64| {
        let mut store = ParamStore::<f64>::new();
        let mff = build_mff(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| e.to_string())?;
        Ok::<_, String>((store, mff))
    };
    let run = |store: &ParamStore<f64>, mff: &Mff, maps: [&Tensor<f64>; 3]| {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let [p, s, v] = maps.map(|m| tape.constant(m.clone()));
        let out = mff
            .forward(&mut tape, &binding, p, s, v)
            .map_err(|e| e.to_string())?;
        Ok::<_, String>(
            [out.global, out.excitation.e_w, out.excitation.e_v].map(|x| tape.value(x).clone()),
        )
    };
    for seed in 0..100u64 {
        let (cp, cs, cv) = (
            1 + seed as usize % 5,
            1 + seed as usize % 3,
            2 + seed as usize % 7,
        );
        let (h, w, hv) = (
            1 + seed as usize % 6,
            1 + seed as usize % 4,
            1 + seed as usize % 5,
        );
        let config = FusionConfig {
            reduction_ratio: 1 + seed as usize % 2,
            ..FusionConfig::new(cp + cs, cv)
        };
        let (store, mff) = build(&config, seed)?;
        let n = 1 + seed as usize % 4;
        let p = random4(&[n, cp, h, w], 3 * seed);
        let s = random4(&[n, cs, h, w], 3 * seed + 1);
        let v = random4(&[n, cv, hv, w], 3 * seed + 2);
        let [global, e_w, e_v] = run(&store, &mff, [&p, &s, &v])?;
        ensure(global.shape() == [n, cp + cs + cv], || {
            format!("seed {seed}: output {:?}", global.shape())
        })?;
        for &e in e_w.data().iter().chain(e_v.data()) {
            ensure(e > 0.0 && e < 1.0, || {
                format!("seed {seed}: excitation {e}")
            })?;
        }

        let mut tape = Tape::new();
        let [vp, vs, vv] = [&p, &s, &v].map(|m| tape.constant(m.clone()));
        let f_w = aggregate_spatial(&mut tape, vp, vs).map_err(|e| e.to_string())?;
        let f_c = joint_descriptor(&mut tape, f_w, vv).map_err(|e| e.to_string())?;
        let ones = Excitation {
            e_w: tape.constant(Tensor::full(&[n, cp + cs], 1.0)),
            e_v: tape.constant(Tensor::full(&[n, cv], 1.0)),
        };
        let (rw, rv) = recalibrate(&mut tape, f_w, vv, &ones).map_err(|e| e.to_string())?;
        let g = global_feature(&mut tape, rw, rv).map_err(|e| e.to_string())?;
        let gap = tape
            .value(g)
            .data()
            .iter()
            .zip(tape.value(f_c).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(gap <= 1e-12, || {
            format!("seed {seed}: identity recalibration off by {gap:e}")
        })?;

        if n > 1 {
            let perm: Vec<usize> = (0..n).rev().collect();
            let permute = |x: &Tensor<f64>| {
                let row = x.len() / n;
                Tensor::from_fn(x.shape(), |k| x.data()[perm[k / row] * row + k % row])
            };
            let [shuffled, ..] = run(&store, &mff, [&permute(&p), &permute(&s), &permute(&v)])?;
            ensure(shuffled == permute(&global), || {
                format!("seed {seed}: batch permutation changed rows")
            })?;
        }
    }
    Ok("100 random configurations".into())
}

struct DeskRuns {
    table: AblationTable,
    all_time: Duration,
    total: Duration,
}

fn desk_ablation() -> Result<DeskRuns, String> {
    let masks: Vec<BranchMask> = ["V", "S+V", "P+S+V"]
        .iter()
        .map(|m| m.parse().unwrap())
        .collect();
    let config = TrainConfig::desk();
    let eval = EvalOptions::default();
    let plan = AblationPlan {
        config: &config,
        eval: &eval,
        masks: &masks,
        seeds: &[0, 1, 2],
    };
    let start = Instant::now();
    let mut last = start;
    let mut all_time = Duration::ZERO;
    let table = ablation_suite(
        plan,
        |seed| {
            let data = generate_dataset(&SynthConfig {
                seed,
                ..SynthConfig::default()
            })?;
            let (gallery, probe) = split_gallery_probe(&data.sequences, 4);
            Ok::<_, SynthError>(Protocol {
                train: gallery.clone(),
                gallery,
                probe,
            })
        },
        |mask, seed, report| {
            let now = Instant::now();
            if mask == BranchMask::ALL {
                all_time += now - last;
            }
            eprintln!(
                "  {:<6} seed {seed}: overall {:.4}",
                mask.label(),
                report.overall
            );
            last = now;
        },
    )
    .map_err(|e| e.to_string())?;
    Ok(DeskRuns {
        table,
        all_time,
        total: start.elapsed(),
    })
}

fn end_to_end(runs: &DeskRuns) -> Outcome {
    let row = runs
        .table
        .row(BranchMask::ALL)
        .ok_or("missing all-branch row")?;
    let (nm, cl) = (
        row.condition(Condition::Normal).mean,
        row.condition(Condition::Coat).mean,
    );
    let summary = format!(
        "NM {nm:.4}, CL {cl:.4}, three runs in {:.0?}",
        runs.all_time
    );
    ensure(nm >= 0.9 && cl >= 0.7, || summary.clone())?;
    ensure(runs.all_time <= Duration::from_secs(600), || {
        format!("too slow: {summary}")
    })?;
    Ok(summary)
}

fn ablation_trend(runs: &DeskRuns) -> Outcome {
    let overall = |label: &str| {
        let mask: BranchMask = label.parse().unwrap();
        runs.table
            .row(mask)
            .map(|r| r.overall().mean)
            .ok_or(format!("missing {label} row"))
    };
    let (all, sv, v) = (overall("P+S+V")?, overall("S+V")?, overall("V")?);
    let summary = format!(
        "P+S+V {all:.4} ≥ S+V {sv:.4} ≥ V {v:.4}, total {:.0?}",
        runs.total
    );
    ensure(all >= sv && sv >= v && all - v >= 0.05, || summary.clone())?;
    ensure(runs.total <= Duration::from_secs(1800), || {
        format!("too slow: {summary}")
    })?;
    Ok(summary)
}

fn pckh_cases() -> Outcome {
    let frame_at = |offset: f64| {
        KeypointFrame::new(
            0,
            std::array::from_fn(|j| Joint::new(j as f64 * 0.1 + offset, 0.5, 1.0)),
        )
    };
    let truth = vec![frame_at(0.0); 3];
    let predicted: Vec<KeypointFrame> = [0.005, 0.02, 0.009].iter().map(|&d| frame_at(d)).collect();
    let scores = pckh(&predicted, &truth, &[1.0; 3], 0.01).map_err(|e| e.to_string())?;
    ensure(scores.mean == 2.0 / 3.0, || {
        format!("hand case gave {}", scores.mean)
    })?;
    let same = pckh(&truth, &truth, &[1.0; 3], 0.01).map_err(|e| e.to_string())?;
    ensure(same.mean == 1.0, || format!("identity gave {}", same.mean))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let m = rng.random_range(1..8);
        let frame = |rng: &mut ChaCha8Rng| {
            KeypointFrame::new(
                0,
                std::array::from_fn(|_| Joint::new(rng.random(), rng.random(), 1.0)),
            )
        };
        let truth: Vec<KeypointFrame> = (0..m).map(|_| frame(&mut rng)).collect();
        let pred: Vec<KeypointFrame> = (0..m).map(|_| frame(&mut rng)).collect();
        let scales: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let mut last = pckh(&pred, &truth, &scales, 0.0).map_err(|e| e.to_string())?;
        for k in 1..=80 {
            let next = pckh(&pred, &truth, &scales, k as f64 * 0.1).map_err(|e| e.to_string())?;
            let monotone = next.mean >= last.mean
                && (0..NUM_JOINTS).all(|j| next.per_joint[j] >= last.per_joint[j]);
            ensure(monotone, || {
                format!("case {case}: score fell at threshold {}", k as f64 * 0.1)
            })?;
            last = next;
        }
    }
    Ok("2/3 exact, identity 1.0, monotone on 100 random cases".into())
}

fn determinism() -> Outcome {
    let data = generate_dataset(&SynthConfig {
        subjects: 3,
        nm_sequences: 3,
        bg_sequences: 1,
        cl_sequences: 1,
        views: vec![90],
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let (gallery, probe) = split_gallery_probe(&data.sequences, 2);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        model: ModelConfig {
            stem_channels: 4,
            stages: vec![StageSpec::new(1, 8, 2)],
            reduction_ratio: 4,
        },
        ..TrainConfig::desk()
    };
    let run = || -> Result<(Vec<u8>, String), String> {
        let out = train(&gallery, &config, BranchMask::ALL).map_err(|e| e.to_string())?;
        let report = rank1_eval(&out.best, &gallery, &probe, &EvalOptions::default())
            .map_err(|e| e.to_string())?;
        let bytes = encode_checkpoint(&out.checkpoint).map_err(|e| e.to_string())?;
        Ok((bytes, report.to_tsv()))
    };
    let (a, b) = (run()?, run()?);
    ensure(a.0 == b.0, || {
        "checkpoints differ between identical runs".into()
    })?;
    ensure(a.1 == b.1, || {
        "reports differ between identical runs".into()
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (first, second) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    std::fs::write(&first, &a.0).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&first).map_err(|e| e.to_string())?;
    save_checkpoint(&loaded, &second).map_err(|e| e.to_string())?;
    let again = std::fs::read(&second).map_err(|e| e.to_string())?;
    ensure(again == a.0, || "save, load, save changed the bytes".into())?;
    Ok(format!("{} checkpoint bytes reproduced", a.0.len()))
}

fn report(id: usize, name: &str, budget: Duration, elapsed: Duration, outcome: Outcome) -> bool {
    let outcome = outcome.and_then(|msg| {
        if elapsed <= budget {
            Ok(msg)
        } else {
            Err(format!("{msg}; over the {budget:?} budget"))
        }
    });
    let (tag, msg) = match &outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("{tag} {id} {name} [{elapsed:.1?}] {msg}");
    outcome.is_ok()
}

fn timed(f: impl FnOnce() -> Outcome) -> (Duration, Outcome) {
    let start = Instant::now();
    let outcome = f();
    (start.elapsed(), outcome)
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut ok = true;
    let checks: [Check; 4] = [
        (1, "gradient correctness", secs(120), gradients),
        (2, "cycle recovery", secs(30), cycles),
        (3, "branch oracles", secs(30), branch_oracles),
        (4, "fusion invariants", secs(30), fusion_invariants),
    ];
    for (id, name, budget, check) in checks {
        let (elapsed, outcome) = timed(check);
        ok &= report(id, name, budget, elapsed, outcome);
    }

    let (elapsed, runs) = {
        let start = Instant::now();
        let runs = desk_ablation();
        (start.elapsed(), runs)
    };
    match runs {
        Ok(runs) => {
            ok &= report(
                5,
                "desk-scale end to end",
                secs(600),
                runs.all_time,
                end_to_end(&runs),
            );
            ok &= report(
                6,
                "ablation trend",
                secs(1800),
                elapsed,
                ablation_trend(&runs),
            );
            print!("{}", runs.table.to_table());
        }
        Err(e) => {
            ok &= report(
                5,
                "desk-scale end to end",
                secs(600),
                elapsed,
                Err(e.clone()),
            );
            ok &= report(6, "ablation trend", secs(1800), elapsed, Err(e));
        }
    }

    let (elapsed, outcome) = timed(pckh_cases);
    ok &= report(7, "pckh exactness", secs(5), elapsed, outcome);
    let (elapsed, outcome) = timed(determinism);
    ok &= report(
        8,
        "determinism and serialization",
        secs(60),
        elapsed,
        outcome,
    );
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
