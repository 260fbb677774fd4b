use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{key, optional, required, CliError, CliResult, CommandSpec, KeySpec, Settings};
use crate::cascade::{Cascade, CascadeConfig, StageOptions};
use crate::curation::{
    curate, load_corpus, save_corpus, synth_corpus, CurateConfig, Manifest, SynthConfig,
};
use crate::denoiser::{Conditioning, DenoiserConfig, DenoiserParams, Stage};
use crate::error::Error;
use crate::eval::{
    correlation_report, eval_prompts, sbs_compare, sweep_harness, write_sweep_csv, EvalPrompt,
    ImageSource, JudgeConfig, StageSource,
};
use crate::prompt::{parse_prompt, prompt_set, tokens_to_text};
use crate::rl::{rl_align, RlConfig, ValueParams};
use crate::rng::RngStream;
use crate::scheduler::NoiseSchedule;
use crate::trainer::{finetune, pretrain, write_jsonl, TrainConfig};

pub(super) fn all() -> Vec<CommandSpec> {
    vec![
        CommandSpec {
            name: "synth",
            about: "Generate a synthetic captioned corpus",
            keys: vec![
                required("n", "number of records"),
                key("seed", "0", "generator seed"),
                required("out", "output corpus directory"),
                key(
                    "defect_rate",
                    "0.3",
                    "share of records with block and pixel noise",
                ),
                key(
                    "accurate_caption_rate",
                    "0.75",
                    "share of fully accurate captions",
                ),
                key("monotonic_rate", "0.4", "share of plain-background images"),
                key(
                    "labeled_fraction",
                    "0.2",
                    "share of records with assessor labels",
                ),
            ],
            run: synth,
        },
        CommandSpec {
            name: "curate",
            about: "Prefilter a corpus and keep the top share by the fidelity ranker",
            keys: vec![
                required("corpus", "input corpus directory"),
                required("out", "output corpus directory"),
                key("fraction", "0.1", "share of the input corpus to keep"),
                key(
                    "quota",
                    "0.1",
                    "largest share of the selection on a plain background",
                ),
                key(
                    "keep_fraction",
                    "0.333333333333",
                    "share kept by the image-score prefilter",
                ),
                key(
                    "sfc_rounds",
                    "200",
                    "boosting rounds of the fidelity ranker",
                ),
            ],
            run: curate_cmd,
        },
        CommandSpec {
            name: "train",
            about: "Pre-train one cascade stage on a corpus",
            keys: train_keys(&[
                required("corpus", "training corpus directory"),
                key("stage", "base", "base, sr1 or sr2"),
                optional("resolution", "stage resolution (8, 16 and 32 by default)"),
                key("width", "1", "base-stage width multiplier"),
                key("steps", "2000", "optimizer steps"),
                key("lr", "0.001", "learning rate"),
            ]),
            run: train,
        },
        CommandSpec {
            name: "finetune",
            about: "Continue training released weights on a curated corpus",
            keys: train_keys(&[
                required("from", "checkpoint to fine-tune"),
                required("corpus", "fine-tuning corpus directory"),
                key("steps", "500", "optimizer steps"),
                key("lr", "0.0001", "learning rate"),
            ]),
            run: finetune_cmd,
        },
        CommandSpec {
            name: "rl",
            about: "Align a base-stage model with patch-wise PPO on three rewards",
            keys: vec![
                required("from", "base-stage checkpoint"),
                required("out", "output directory"),
                key("lora_rank", "4", "LoRA adapter rank"),
                key("lora_scale", "1", "LoRA scale"),
                key("steps", "80", "optimizer steps"),
                key("lr", "0.001", "policy learning rate"),
                key("clip_epsilon", "0.5", "PPO clip range"),
                key("n_sample_steps", "100", "sampling steps per trajectory"),
                key("patch_size", "4", "pixels per patch side"),
                key(
                    "reward_weights",
                    "1,1,1",
                    "relevance, consistency and aesthetics weights",
                ),
                key(
                    "refresh_every",
                    "4",
                    "optimizer steps between policy refreshes",
                ),
                key("batch_trajectories", "64", "trajectories per refresh"),
                key("value_lr", "0.1", "value baseline learning rate"),
                key("value_hidden", "16", "value baseline hidden width"),
                key("seed", "0", "run seed"),
            ],
            run: rl,
        },
        CommandSpec {
            name: "sample",
            about: "Sample images from a base model or a full cascade",
            keys: source_keys(&[
                required("base", "base-stage checkpoint"),
                required("out", "output directory"),
                key(
                    "prompt",
                    "all",
                    "caption text, or all for the packaged prompt set",
                ),
                key("seeds", "1", "images per prompt"),
                key("seed", "0", "sampling seed"),
            ]),
            run: sample,
        },
        CommandSpec {
            name: "eval",
            about: "Side-by-side comparison of two models with simulated assessors",
            keys: judge_keys(source_keys(&[
                required("a", "base-stage checkpoint of model A"),
                required("b", "base-stage checkpoint of model B"),
                required("out", "output directory"),
            ])),
            run: eval,
        },
        CommandSpec {
            name: "sweep",
            about: "Compare periodic training checkpoints against two baselines",
            keys: judge_keys(source_keys(&[
                required("dir", "directory holding ckpt-<step>.yalab files"),
                key(
                    "every",
                    "1",
                    "evaluate checkpoints whose step is a multiple of this",
                ),
                required("baseline_a", "first baseline checkpoint"),
                required("baseline_b", "second baseline checkpoint"),
                required("out", "output CSV file"),
            ])),
            run: sweep,
        },
        CommandSpec {
            name: "correlate",
            about: "Pearson and Spearman correlation of pretrain and finetune columns",
            keys: vec![
                required("input", "CSV file with pretrain and finetune columns"),
                optional("out", "JSON output file; stdout if unset"),
            ],
            run: correlate,
        },
    ]
}

fn train_keys(specific: &[KeySpec]) -> Vec<KeySpec> {
    let mut keys = specific.to_vec();
    keys.extend([
        required("out", "output directory"),
        key("batch", "48", "minibatch size"),
        key("ema_decay", "0.999", "EMA decay of the released weights"),
        key("p_uncond", "0.1", "probability of dropping the caption"),
        key("eval_every", "500", "checkpoint period in steps"),
        key("seed", "0", "run seed"),
    ]);
    keys
}

fn source_keys(specific: &[KeySpec]) -> Vec<KeySpec> {
    let mut keys = specific.to_vec();
    keys.extend([
        optional("sr1", "first super-resolution checkpoint (needs sr2)"),
        optional("sr2", "second super-resolution checkpoint (needs sr1)"),
        key("steps", "32", "sampling steps per stage"),
        key("guidance", "2", "base-stage guidance scale"),
    ]);
    keys
}

fn judge_keys(mut keys: Vec<KeySpec>) -> Vec<KeySpec> {
    keys.extend([
        key("seeds_per_prompt", "1", "pairs per prompt"),
        key(
            "judge_noise",
            "0.05",
            "assessor noise in units of each criterion's spread",
        ),
        key(
            "judge_band",
            "0.1",
            "indifference band in units of each criterion's spread",
        ),
        key(
            "calibration",
            "1000",
            "synthetic images used to measure criterion spreads",
        ),
        key("seed", "0", "evaluation seed"),
    ]);
    keys
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn synth(s: &Settings) -> CliResult<()> {
    let n: usize = s.get("n")?;
    if n == 0 {
        return Err(CliError::Config("synth: key n must be at least 1".into()));
    }
    let seed: u64 = s.get("seed")?;
    let cfg = SynthConfig {
        defect_rate: s.get("defect_rate")?,
        accurate_caption_rate: s.get("accurate_caption_rate")?,
        monotonic_rate: s.get("monotonic_rate")?,
        labeled_fraction: s.get("labeled_fraction")?,
    };
    s.check(cfg.validate())?;
    let records = synth_corpus(n, &cfg, &RngStream::new(seed))?;
    let manifest = Manifest {
        generator: "synth".into(),
        seed: Some(seed),
        count: records.len(),
        synth: Some(cfg),
        notes: Default::default(),
    };
    save_corpus(&s.output_path("out"), &records, &manifest)?;
    eprintln!("synth: wrote {n} records to {}", s.raw("out"));
    Ok(())
}

const CURATION_NOTE: &str = "curation";

fn curate_cmd(s: &Settings) -> CliResult<()> {
    let dir = s.input_path("corpus")?;
    let mut cfg = CurateConfig {
        fraction: s.get("fraction")?,
        monotonic_quota: s.get("quota")?,
        ..CurateConfig::default()
    };
    cfg.limits.keep_fraction = s.get("keep_fraction")?;
    cfg.sfc.rounds = s.get("sfc_rounds")?;
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(CliError::Config(format!(
            "curate: key fraction = {} outside (0, 1]",
            cfg.fraction
        )));
    }
    let (manifest, records) = load_corpus(&dir)?;
    let cfg_json = serde_json::to_value(&cfg).map_err(Error::from)?;
    // A corpus already curated with these settings is its own selection.
    let already =
        manifest.generator == "curate" && manifest.notes.get(CURATION_NOTE) == Some(&cfg_json);
    let (selected, report) = if already {
        let n = records.len();
        let report = crate::curation::CurationReport {
            input: n,
            labeled: records.iter().filter(|r| r.labels.is_some()).count(),
            size_aspect: records.iter().filter(|r| cfg.limits.admits(r)).count(),
            prefiltered: n,
            selected: n,
            selected_monotonic: records.iter().filter(|r| r.monotonic_bg).count(),
        };
        (records, report)
    } else {
        curate(&records, &cfg)?
    };
    let mut notes = manifest.notes.clone();
    notes.insert(CURATION_NOTE.into(), cfg_json);
    let out_manifest = Manifest {
        generator: "curate".into(),
        seed: manifest.seed,
        count: selected.len(),
        synth: manifest.synth.clone(),
        notes,
    };
    let out = s.output_path("out");
    save_corpus(&out, &selected, &out_manifest)?;
    write_json(&out.join("report.json"), &report)?;
    eprintln!(
        "curate: {} -> {} prefiltered -> {} selected ({} plain background)",
        report.input, report.prefiltered, report.selected, report.selected_monotonic
    );
    Ok(())
}

fn train_config(s: &Settings) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: s.get("lr")?,
        batch_size: s.get("batch")?,
        total_steps: s.get("steps")?,
        ema_decay: s.get("ema_decay")?,
        p_uncond: s.get("p_uncond")?,
        eval_every: s.get("eval_every")?,
        seed: s.get("seed")?,
        ..TrainConfig::default()
    };
    s.check(cfg.validate())?;
    Ok(cfg)
}

/// Writes `ckpt-<step>.yalab` into `out` at every checkpoint.
fn checkpoint_writer(out: &Path) -> impl FnMut(usize, &DenoiserParams) -> crate::Result<()> + '_ {
    move |step, p| p.save(&out.join(format!("ckpt-{step}.yalab")))
}

fn train(s: &Settings) -> CliResult<()> {
    let corpus = s.input_path("corpus")?;
    let stage = Stage::parse(s.raw("stage"))
        .map_err(|e| CliError::Config(format!("train: key stage: {e}")))?;
    let resolution: usize = s.opt("resolution")?.unwrap_or(8 << stage.index());
    let config = match stage {
        Stage::Base => DenoiserConfig::base(resolution, s.get("width")?),
        sr => DenoiserConfig::super_resolution(sr, resolution),
    };
    s.check(config.validate())?;
    let cfg = train_config(s)?;
    let (_, records) = load_corpus(&corpus)?;
    let out = s.output_path("out");
    create_dir(&out)?;
    let outcome = pretrain(
        config,
        &records,
        &NoiseSchedule::default(),
        &cfg,
        &mut checkpoint_writer(&out),
    )?;
    write_jsonl(&out.join("metrics.jsonl"), &outcome.metrics)?;
    outcome
        .released
        .save(&out.join(format!("{}.yalab", stage.name())))?;
    if let Some(m) = outcome.metrics.last() {
        eprintln!("train: {} steps, final loss {:.5}", m.step, m.loss);
    }
    Ok(())
}

fn finetune_cmd(s: &Settings) -> CliResult<()> {
    let from = s.input_path("from")?;
    let corpus = s.input_path("corpus")?;
    let cfg = train_config(s)?;
    let params = DenoiserParams::load(&from)?;
    let (_, records) = load_corpus(&corpus)?;
    let out = s.output_path("out");
    create_dir(&out)?;
    let outcome = finetune(
        &params,
        &records,
        &NoiseSchedule::default(),
        &cfg,
        &mut checkpoint_writer(&out),
    )?;
    write_jsonl(&out.join("metrics.jsonl"), &outcome.metrics)?;
    outcome.released.save(&out.join("finetuned.yalab"))?;
    if let Some(m) = outcome.metrics.last() {
        eprintln!("finetune: {} steps, final loss {:.5}", m.step, m.loss);
    }
    Ok(())
}

fn rl(s: &Settings) -> CliResult<()> {
    let from = s.input_path("from")?;
    let weights: Vec<f64> = s.list("reward_weights")?;
    let reward_weights: [f64; 3] = weights
        .try_into()
        .map_err(|_| CliError::Config("rl: key reward_weights needs three values".into()))?;
    let cfg = RlConfig {
        clip_epsilon: s.get("clip_epsilon")?,
        n_sample_steps: s.get("n_sample_steps")?,
        patch_size: s.get("patch_size")?,
        reward_weights,
        refresh_every: s.get("refresh_every")?,
        batch_trajectories: s.get("batch_trajectories")?,
        value_lr: s.get("value_lr")?,
        learning_rate: s.get("lr")?,
        total_steps: s.get("steps")?,
        value_hidden: s.get("value_hidden")?,
        seed: s.get("seed")?,
        ..RlConfig::default()
    };
    let mut params = DenoiserParams::load(&from)?;
    if params.config.is_super_resolution() {
        return Err(CliError::Config(format!(
            "rl: key from: {} holds a {} model, alignment needs the base stage",
            from.display(),
            params.config.stage.name()
        )));
    }
    s.check(cfg.validate(params.config.resolution))?;
    let root = RngStream::new(cfg.seed).fork("rl");
    if !params.has_lora() {
        params.attach_lora(
            s.get("lora_rank")?,
            s.get("lora_scale")?,
            &root.fork("lora"),
        )?;
    }
    let vp = ValueParams::init(cfg.value_hidden, &root.fork("value"))?;
    let pool: Vec<Conditioning> = prompt_set()
        .into_iter()
        .map(|e| Conditioning::text(e.attributes.tokens()))
        .collect();
    let out = s.output_path("out");
    create_dir(&out)?;
    let mut hook = |m: &crate::rl::RlMetrics, _: &DenoiserParams| {
        eprintln!(
            "rl: refresh {} relevance {:.4} consistency {:.4} aesthetics {:.4}",
            m.refresh, m.mean_relevance, m.mean_consistency, m.mean_aesthetics
        );
        Ok(())
    };
    let outcome = rl_align(
        &params,
        &vp,
        &NoiseSchedule::default(),
        &cfg,
        &pool,
        &root,
        &mut hook,
    )?;
    outcome.params.save(&out.join("aligned.yalab"))?;
    outcome.value.to_table().save(&out.join("value.yalab"))?;
    write_jsonl(&out.join("rl_metrics.jsonl"), &outcome.metrics)?;
    Ok(())
}

/// A base model alone, or a full cascade when both upscalers are given.
fn load_source(s: &Settings, base: &Path) -> CliResult<(Box<dyn ImageSource>, usize)> {
    let steps: usize = s.get("steps")?;
    let guidance: f64 = s.get("guidance")?;
    if steps == 0 {
        return Err(CliError::Config(format!(
            "{}: key steps must be at least 1",
            s.command
        )));
    }
    let sr1 = s.opt_input_path("sr1")?;
    let sr2 = s.opt_input_path("sr2")?;
    let base_params = DenoiserParams::load(base)?;
    let sched = NoiseSchedule::default();
    match (sr1, sr2) {
        (None, None) => {
            let side = base_params.config.resolution;
            let opts = StageOptions {
                steps,
                guidance,
                ..StageOptions::default()
            };
            Ok((
                Box::new(StageSource {
                    params: base_params,
                    sched,
                    opts,
                }),
                side,
            ))
        }
        (Some(p1), Some(p2)) => {
            let models = [
                base_params,
                DenoiserParams::load(&p1)?,
                DenoiserParams::load(&p2)?,
            ];
            let resolutions = [0, 1, 2].map(|k| models[k].config.resolution);
            let mut guidance_scale = CascadeConfig::default().guidance_scale;
            guidance_scale[0] = guidance;
            let config = CascadeConfig {
                resolutions,
                steps_per_stage: [steps; 3],
                guidance_scale,
                ..CascadeConfig::default()
            };
            Ok((
                Box::new(Cascade {
                    models,
                    sched,
                    config,
                }),
                resolutions[2],
            ))
        }
        _ => Err(CliError::Config(format!(
            "{}: keys sr1 and sr2 go together",
            s.command
        ))),
    }
}

#[derive(Serialize)]
struct SampleIndex {
    prompt_id: u64,
    seed: usize,
    prompt: String,
    file: String,
}

fn sample(s: &Settings) -> CliResult<()> {
    let base = s.input_path("base")?;
    let seeds: usize = s.get("seeds")?;
    let prompts: Vec<EvalPrompt> = if s.raw("prompt") == "all" {
        eval_prompts()
    } else {
        let tokens = parse_prompt(s.raw("prompt"))
            .map_err(|e| CliError::Config(format!("sample: key prompt: {e}")))?;
        vec![EvalPrompt { id: 0, tokens }]
    };
    let (source, _) = load_source(s, &base)?;
    let root = RngStream::new(s.get("seed")?).fork("sample");
    let out = s.output_path("out");
    create_dir(&out)?;
    let jobs: Vec<(usize, &EvalPrompt)> = (0..seeds)
        .flat_map(|k| prompts.iter().map(move |p| (k, p)))
        .collect();
    let mut index = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(64) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|(_, p)| p.tokens.clone()).collect();
        let streams: Vec<RngStream> = chunk
            .iter()
            .map(|(k, p)| root.fork_index(p.id).fork_index(*k as u64))
            .collect();
        let images = source.generate(&tokens, &streams)?;
        for ((k, p), img) in chunk.iter().zip(images) {
            let file = format!("{:03}-{k}.ppm", p.id);
            img.write_pnm(&out.join(&file))?;
            index.push(SampleIndex {
                prompt_id: p.id,
                seed: *k,
                prompt: tokens_to_text(&p.tokens),
                file,
            });
        }
    }
    write_jsonl(&out.join("index.jsonl"), &index)?;
    eprintln!("sample: wrote {} images to {}", index.len(), out.display());
    Ok(())
}

fn judge(s: &Settings, side: usize, root: &RngStream) -> CliResult<JudgeConfig> {
    let n: usize = s.get("calibration")?;
    if n < 2 {
        return Err(CliError::Config(format!(
            "{}: key calibration must be at least 2",
            s.command
        )));
    }
    let mut j =
        JudgeConfig::from_synthetic(n, side, s.get("judge_noise")?, &root.fork("calibration"))?;
    j.band = s.get("judge_band")?;
    s.check(j.validate())?;
    Ok(j)
}

fn eval(s: &Settings) -> CliResult<()> {
    let (a, b) = (s.input_path("a")?, s.input_path("b")?);
    let seeds: usize = s.get("seeds_per_prompt")?;
    let (src_a, side) = load_source(s, &a)?;
    let (src_b, side_b) = load_source(s, &b)?;
    if side != side_b {
        return Err(CliError::Config(format!(
            "eval: models sample at sides {side} and {side_b}"
        )));
    }
    let root = RngStream::new(s.get("seed")?).fork("eval");
    let judge = judge(s, side, &root)?;
    let (result, votes) = sbs_compare(
        src_a.as_ref(),
        src_b.as_ref(),
        &eval_prompts(),
        seeds,
        &judge,
        &root.fork("sbs"),
    )?;
    let out = s.output_path("out");
    create_dir(&out)?;
    write_jsonl(&out.join("votes.jsonl"), &votes)?;
    write_json(&out.join("result.json"), &result)?;
    eprintln!(
        "eval: A wins {} B wins {} ties {}, win rate {:.3}, p = {:.3e}",
        result.wins_a, result.wins_b, result.ties, result.win_rate_a, result.p_value
    );
    Ok(())
}

/// `ckpt-<step>.yalab` files in `dir`, by step.
fn list_checkpoints(dir: &Path) -> CliResult<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Runtime(Error::io(dir, e)))?
            .path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".yalab"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

fn sweep(s: &Settings) -> CliResult<()> {
    let dir = s.input_path("dir")?;
    let (pa, pb) = (s.input_path("baseline_a")?, s.input_path("baseline_b")?);
    let every: usize = s.get("every")?;
    if every == 0 {
        return Err(CliError::Config(
            "sweep: key every must be at least 1".into(),
        ));
    }
    let seeds: usize = s.get("seeds_per_prompt")?;
    let checkpoints = list_checkpoints(&dir)?;
    if checkpoints.is_empty() {
        return Err(CliError::Config(format!(
            "sweep: key dir: no ckpt-<step>.yalab files in {}",
            dir.display()
        )));
    }
    let (base_a, side) = load_source(s, &pa)?;
    let (base_b, _) = load_source(s, &pb)?;
    let root = RngStream::new(s.get("seed")?).fork("sweep");
    let judge = judge(s, side, &root)?;
    let loader = |p: &Path| {
        load_source(s, p).map(|(src, _)| src).map_err(|e| match e {
            CliError::Runtime(e) => e,
            CliError::Config(m) => Error::InvalidArgument(m),
        })
    };
    let rows = sweep_harness(
        &checkpoints,
        &loader,
        [
            ("baseline_a", base_a.as_ref()),
            ("baseline_b", base_b.as_ref()),
        ],
        every,
        &eval_prompts(),
        seeds,
        &judge,
        &root.fork("sbs"),
    )?;
    let out = s.output_path("out");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_sweep_csv(&out, &rows)?;
    eprintln!(
        "sweep: {} comparisons written to {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

fn correlate(s: &Settings) -> CliResult<()> {
    let input = s.input_path("input")?;
    let mut reader = csv::Reader::from_path(&input)
        .map_err(|e| CliError::Runtime(Error::Format(format!("{}: {e}", input.display()))))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Runtime(Error::Format(format!("{}: {e}", input.display()))))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "correlate: {} has no {name} column",
                    input.display()
                ))
            })
    };
    let (ip, ifn) = (column("pretrain")?, column("finetune")?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (n, row) in reader.records().enumerate() {
        let row =
            row.map_err(|e| CliError::Runtime(Error::Format(format!("{}: {e}", input.display()))))?;
        let parse = |i: usize| -> CliResult<f64> {
            row.get(i).unwrap_or("").trim().parse().map_err(|e| {
                CliError::Runtime(Error::Format(format!(
                    "{}: row {}: {e}",
                    input.display(),
                    n + 1
                )))
            })
        };
        xs.push(parse(ip)?);
        ys.push(parse(ifn)?);
    }
    let report = correlation_report(&xs, &ys)?;
    if s.is_set("out") {
        write_json(&s.output_path("out"), &report)?;
    } else {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(Error::from)?
        );
    }
    Ok(())
}
