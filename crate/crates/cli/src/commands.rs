use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rlvr_core::config::RunConfig;
use rlvr_core::grpo::{generate, GrpoTrainer, RewardContext, RewardKind, StepMetrics, TrainerState};
use rlvr_core::metrics::{ema, evaluate, LabelFilter, REPORT_EMA_ALPHA};
use rlvr_core::parser::{parse_completion, Dialect, ParsedOutput};
use rlvr_core::policy::{GenConfig, PolicyParams};
use rlvr_core::sampler::{label_counts, split_disjoint, SamplePlan, Shortfall};
use rlvr_core::sft::{self, oracle_dataset};
use rlvr_core::toyenv::{gen_task, Example};
use rlvr_core::vocab::{label_stats, Label, LabelSet, LabelStats};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::fail::{Classify, Failure};
use crate::files::{self, create_dir, read_checkpoint, read_examples, read_items, write_checkpoint, write_json};
use crate::{LabelsArg, RewardArg};

type Res = Result<(), Failure>;

fn ensure_parent(path: &Path) -> Res {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn gen(mut cfg: RunConfig, out: Option<PathBuf>, n: Option<usize>, seed: Option<u64>) -> Res {
    cfg.task.n = n.unwrap_or(cfg.task.n);
    cfg.task.seed = seed.unwrap_or(cfg.task.seed);
    let path = out.unwrap_or_else(|| cfg.io.pool.clone());
    let task = gen_task(cfg.task.n, cfg.task.d, cfg.task.seed).or_usage("generating task")?;
    ensure_parent(&path)?;
    files::write_jsonl(&path, task.to_pool())?;
    eprintln!("wrote {} items to {}", task.examples.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct Coverage<'a> {
    sft: &'a rlvr_core::sampler::CoverageReport,
    rl: &'a rlvr_core::sampler::CoverageReport,
}

pub fn sample(cfg: RunConfig, pool: Option<PathBuf>, out: Option<PathBuf>) -> Res {
    let pool_path = pool.unwrap_or_else(|| cfg.io.pool.clone());
    let dir = out.unwrap_or_else(|| cfg.io.data_dir.clone());
    let items = read_items(&pool_path)?;
    let s = &cfg.sampler;
    let total = s.sft_n + s.rl_n;
    if total > items.len() {
        return Err(Failure::usage(format!(
            "sampler.sft_n + sampler.rl_n = {total} exceeds the pool size {}",
            items.len()
        )));
    }

    // Both splits draw from the same pool, so their floors add up.
    let plan = s.plan();
    let required = plan.target() + SamplePlan { n: s.rl_n, ..plan.clone() }.target();
    let available = label_counts(items.iter().map(|i| i.labels));
    let shortfalls: Vec<Shortfall> = Label::all()
        .filter(|l| available[l.id()] < required)
        .map(|label| Shortfall { label, available: available[label.id()], required })
        .collect();
    if !shortfalls.is_empty() {
        eprintln!("{}", serde_json::to_string_pretty(&json!({ "shortfalls": shortfalls }))?);
        return Err(Failure::usage(format!("coverage infeasible: {} label(s) below the floor", shortfalls.len())));
    }

    let (sft, rl) = split_disjoint(&items, s.sft_n, s.rl_n, &plan).or_data("sampling")?;
    for (name, sel) in [("sft", &sft), ("rl", &rl)] {
        if !sel.coverage.satisfied() {
            let short: Vec<Shortfall> = sel
                .coverage
                .labels
                .iter()
                .filter(|c| c.count < sel.coverage.target)
                .map(|c| Shortfall { label: c.label, available: c.count, required: sel.coverage.target })
                .collect();
            eprintln!("{}", serde_json::to_string_pretty(&json!({ "split": name, "shortfalls": short }))?);
            return Err(Failure::usage(format!("coverage infeasible for the {name} split")));
        }
    }

    create_dir(&dir)?;
    files::write_jsonl(&dir.join("sft.jsonl"), &sft.items)?;
    files::write_jsonl(&dir.join("rl.jsonl"), &rl.items)?;
    write_json(&dir.join("coverage.json"), &Coverage { sft: &sft.coverage, rl: &rl.coverage })?;
    cfg.save(&dir.join("config.toml"))?;
    eprintln!("wrote {} SFT and {} RL items to {}", sft.items.len(), rl.items.len(), dir.display());
    Ok(())
}

/// Appends an EMA column after the raw columns for every column but the
/// first (the step or epoch index).
fn with_ema(header: &[&str], rows: &[Vec<f64>]) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut h: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    h.extend(header[1..].iter().map(|c| format!("{c}_ema")));
    let smoothed: Vec<Vec<f64>> = (1..header.len())
        .map(|j| ema(&rows.iter().map(|r| r[j]).collect::<Vec<_>>(), REPORT_EMA_ALPHA))
        .collect();
    let out = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend(smoothed.iter().map(|col| col[i]));
            row
        })
        .collect();
    (h, out)
}

pub fn train_sft(cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Res {
    let data = data.unwrap_or_else(|| cfg.io.data_dir.join("sft.jsonl"));
    let dir = out.unwrap_or_else(|| cfg.io.run_dir.join("sft"));
    let examples = read_examples(&data)?;
    let d = examples[0].observation.features.len();
    let traces = oracle_dataset(&examples, cfg.sft.seed);
    let init = PolicyParams::random(d, cfg.sft.init_scale, cfg.sft.seed);

    create_dir(&dir)?;
    cfg.save(&dir.join("config.toml"))?;
    let outcome = sft::train_sft(&cfg.sft, &traces, init).or_usage("SFT")?;
    write_checkpoint(&dir.join("policy.ckpt"), &outcome.params, cfg.sft.seed)?;

    let rows: Vec<Vec<f64>> = outcome
        .log
        .iter()
        .map(|e| vec![e.epoch as f64, e.train_loss, e.val_loss, e.learning_rate])
        .collect();
    let (header, rows) = with_ema(&["epoch", "train_loss", "val_loss", "learning_rate"], &rows);
    files::write_csv(&dir.join("metrics.csv"), &header, &rows)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "stage": "sft",
            "data": data,
            "traces": traces.len(),
            "feature_dim": d,
            "checkpoint": "policy.ckpt",
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.epochs_run,
            "log": outcome.log,
        }),
    )?;
    let best = &outcome.log[outcome.best_epoch];
    eprintln!(
        "sft: {} epochs, best epoch {} (val loss {:.4}); wrote {}",
        outcome.epochs_run,
        outcome.best_epoch,
        best.val_loss,
        dir.display()
    );
    Ok(())
}

/// Periodic GRPO checkpoint pointer; written after the checkpoint it names.
#[derive(Serialize, Deserialize)]
struct SavedState {
    checkpoint: String,
    trainer: TrainerState,
}

fn grpo_csv(dir: &Path, rows: &[Vec<f64>]) -> Res {
    let (header, rows) = with_ema(&StepMetrics::CSV_COLUMNS, rows);
    files::write_csv(&dir.join("metrics.csv"), &header, &rows)
}

fn save_periodic(dir: &Path, trainer: &GrpoTrainer, rows: &[Vec<f64>], seed: u64) -> Res {
    let state = trainer.state();
    let name = format!("checkpoint-{:06}.ckpt", state.step);
    write_checkpoint(&dir.join(&name), &trainer.params, seed)?;
    grpo_csv(dir, rows)?;
    let previous = read_state(dir).ok().map(|s| s.checkpoint);
    write_json(&dir.join("state.json"), &SavedState { checkpoint: name.clone(), trainer: state })?;
    if let Some(prev) = previous.filter(|p| *p != name) {
        let _ = fs::remove_file(dir.join(prev));
    }
    Ok(())
}

fn read_state(dir: &Path) -> Result<SavedState, Failure> {
    let path = dir.join("state.json");
    serde_json::from_reader(files::open(&path)?).or_data(&format!("reading {}", path.display()))
}

pub fn train_grpo(
    cfg: RunConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    init: Option<PathBuf>,
    resume: bool,
    stop_after: Option<usize>,
) -> Res {
    let data = data.unwrap_or_else(|| cfg.io.data_dir.join("rl.jsonl"));
    let dir = out.unwrap_or_else(|| cfg.io.run_dir.join("grpo"));
    let init = init.unwrap_or_else(|| cfg.io.run_dir.join("sft").join("policy.ckpt"));
    let reference = read_checkpoint(&init)?;
    let examples = read_examples(&data)?;
    if examples[0].observation.features.len() != reference.feature_dim() {
        return Err(Failure::data(format!(
            "{} has {} features but the checkpoint expects {}",
            data.display(),
            examples[0].observation.features.len(),
            reference.feature_dim()
        )));
    }
    let labels: Vec<LabelSet> = examples.iter().map(|e| e.labels).collect();
    let stats = label_stats(&labels).or_data("label statistics")?;
    let rewards = RewardContext::new(cfg.grpo.reward, cfg.rewards.hard.clone(), cfg.rewards.nuanced.clone(), stats);
    let mut trainer = GrpoTrainer::new(cfg.grpo.clone(), reference, &examples, rewards).or_usage("GRPO")?;
    let seed = cfg.grpo.seed;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    if resume {
        let state = read_state(&dir)?;
        let params = read_checkpoint(&dir.join(&state.checkpoint))?;
        let (_, logged) = files::read_csv(&dir.join("metrics.csv"))?;
        let step = state.trainer.step;
        rows = logged
            .into_iter()
            .filter(|r| (r[0] as usize) < step)
            .map(|r| r[..StepMetrics::CSV_COLUMNS.len()].to_vec())
            .collect();
        if rows.len() != step {
            return Err(Failure::data(format!("metrics.csv has {} rows before step {step}", rows.len())));
        }
        trainer.restore(params, state.trainer);
        eprintln!("grpo: resuming at step {step}");
    } else {
        create_dir(&dir)?;
    }
    cfg.save(&dir.join("config.toml"))?;
    let manifest = |status: &str, steps: usize| {
        json!({
            "stage": "grpo",
            "status": status,
            "reference": init,
            "data": data,
            "examples": examples.len(),
            "steps_done": steps,
            "checkpoint": "policy.ckpt",
        })
    };
    write_json(&dir.join("manifest.json"), &manifest("running", trainer.step_index()))?;

    let every = cfg.io.checkpoint_every;
    while trainer.step_index() < cfg.grpo.steps {
        if stop_after.is_some_and(|n| trainer.step_index() >= n) {
            save_periodic(&dir, &trainer, &rows, seed)?;
            eprintln!("grpo: stopped after step {}; resume with --resume", trainer.step_index());
            return Ok(());
        }
        let m = trainer.step().or_data("GRPO step")?;
        if m.step % 25 == 0 {
            eprintln!(
                "step {:>4}  reward {:.3}  jaccard {:.3}  entropy {:.3}  kl {:.4}",
                m.step, m.reward_mean, m.jaccard_mean, m.entropy, m.kl
            );
        }
        rows.push(m.values());
        if every > 0 && trainer.step_index() % every == 0 {
            save_periodic(&dir, &trainer, &rows, seed)?;
        }
    }

    write_checkpoint(&dir.join("policy.ckpt"), &trainer.params, seed)?;
    grpo_csv(&dir, &rows)?;
    write_json(&dir.join("manifest.json"), &manifest("complete", trainer.step_index()))?;
    eprintln!("grpo: {} steps; wrote {}", trainer.step_index(), dir.display());
    Ok(())
}

pub fn predict(cfg: RunConfig, checkpoint: &Path, input: &Path, out: Option<PathBuf>, greedy: bool) -> Res {
    let params = read_checkpoint(checkpoint)?;
    let examples: Vec<Example> = read_examples(input)?;
    if examples[0].observation.features.len() != params.feature_dim() {
        return Err(Failure::data("feature dimension does not match the checkpoint"));
    }
    let gen = if greedy { GenConfig::greedy(cfg.eval.decoding.max_len) } else { cfg.eval.decoding.clone() };
    let completions = generate(&params, &examples, &gen, cfg.eval.seed);
    let rows = examples.iter().zip(&completions).map(|(e, c)| json!({ "id": e.id, "text": c.text }));
    match out {
        Some(path) => {
            ensure_parent(&path)?;
            files::write_jsonl(&path, rows)
        }
        None => Ok(rlvr_core::sampler::write_jsonl(io::stdout().lock(), rows)?),
    }
}

fn labels_field(v: &Value, key: &str) -> Result<LabelSet, String> {
    let arr = v.get(key).and_then(Value::as_array).ok_or_else(|| format!("missing {key}"))?;
    let names: Vec<&str> = arr
        .iter()
        .map(|x| x.as_str().ok_or_else(|| format!("{key} must hold strings")))
        .collect::<Result<_, _>>()?;
    LabelSet::from_names(&names).map_err(|e| e.to_string())
}

/// One output object per input line; bad lines become error objects.
fn score_line(line: &str, ctx: &mut RewardContext, dialect: Dialect) -> Value {
    let Ok(v) = serde_json::from_str::<Value>(line) else {
        return json!({ "id": null, "error": "parse" });
    };
    let id = v.get("id").cloned().unwrap_or(Value::Null);
    let Some(text) = v.get("text").and_then(Value::as_str) else {
        return json!({ "id": id, "error": "missing text" });
    };
    let gold = match labels_field(&v, "gold") {
        Ok(g) => g,
        Err(e) => return json!({ "id": id, "error": e }),
    };
    let parsed = parse_completion(text, dialect);
    let r = ctx.score(&parsed, gold);
    json!({
        "id": id,
        "valid": parsed.valid,
        "predicted": parsed.predicted,
        "reward_total": r.total,
        "components": r.components,
    })
}

pub fn score(
    cfg: RunConfig,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    reward: Option<RewardArg>,
    stats: Option<PathBuf>,
) -> Res {
    let kind = match reward {
        Some(RewardArg::Hard) => RewardKind::Hard,
        Some(RewardArg::Nuanced) => RewardKind::Nuanced,
        None => cfg.grpo.reward,
    };
    let stats = match stats {
        Some(p) => {
            let labels: Vec<LabelSet> = read_items(&p)?.iter().map(|i| i.labels).collect();
            label_stats(&labels).or_data("label statistics")?
        }
        None => LabelStats::uniform_zero(),
    };
    let mut ctx = RewardContext::new(kind, cfg.rewards.hard.clone(), cfg.rewards.nuanced.clone(), stats);
    ctx.repetition_bonus = cfg.grpo.repetition_bonus;

    let reader: Box<dyn BufRead> = if files::is_std(&input) {
        Box::new(io::stdin().lock())
    } else {
        Box::new(files::open(input.as_deref().unwrap())?)
    };
    let mut writer: Box<dyn Write> = if files::is_std(&output) {
        Box::new(BufWriter::new(io::stdout().lock()))
    } else {
        let p = output.as_deref().unwrap();
        ensure_parent(p)?;
        Box::new(BufWriter::new(fs::File::create(p).or_usage(&format!("creating {}", p.display()))?))
    };
    for line in reader.lines() {
        let out = score_line(&line?, &mut ctx, cfg.eval.dialect);
        serde_json::to_writer(&mut writer, &out)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn read_json_lines(path: &Path) -> Result<Vec<Value>, Failure> {
    let mut out = Vec::new();
    for (i, line) in files::open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).or_data(&format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn id_of(v: &Value, path: &Path) -> Result<String, Failure> {
    match v.get("id") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(Failure::data(format!("{}: line without an id", path.display()))),
    }
}

pub fn eval(cfg: RunConfig, predictions: &Path, gold: &Path, labels: Option<LabelsArg>, out: Option<PathBuf>) -> Res {
    let filter = match labels {
        Some(LabelsArg::Full14) => LabelFilter::Full14,
        Some(LabelsArg::Nih9) => LabelFilter::Nih9,
        None => cfg.eval.labels,
    };
    let mut golds: Vec<(String, LabelSet)> = Vec::new();
    for v in read_json_lines(gold)? {
        let id = id_of(&v, gold)?;
        let key = if v.get("labels").is_some() { "labels" } else { "gold" };
        let set = labels_field(&v, key).map_err(|e| Failure::data(format!("gold {id:?}: {e}")))?;
        golds.push((id, set));
    }
    let mut preds: HashMap<String, ParsedOutput> = HashMap::new();
    for v in read_json_lines(predictions)? {
        let id = id_of(&v, predictions)?;
        let parsed = if let Some(text) = v.get("text").and_then(Value::as_str) {
            parse_completion(text, cfg.eval.dialect)
        } else {
            let set = labels_field(&v, "predicted").map_err(|e| Failure::data(format!("prediction {id:?}: {e}")))?;
            ParsedOutput { valid: true, predicted: set, ..Default::default() }
        };
        if preds.insert(id.clone(), parsed).is_some() {
            return Err(Failure::data(format!("duplicate prediction id {id:?}")));
        }
    }

    let mut seen = HashSet::new();
    if let Some((dup, _)) = golds.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Failure::data(format!("duplicate gold id {dup:?}")));
    }
    let only_gold = golds.iter().filter(|(id, _)| !preds.contains_key(id)).count();
    let only_pred = preds.keys().filter(|id| !seen.contains(id.as_str())).count();
    if only_gold > 0 || only_pred > 0 {
        return Err(Failure::data(format!(
            "ids do not align: {only_gold} gold id(s) without a prediction, {only_pred} prediction id(s) without gold"
        )));
    }
    if golds.is_empty() {
        return Err(Failure::data("no examples to evaluate"));
    }

    let parsed: Vec<ParsedOutput> = golds.iter().map(|(id, _)| preds.remove(id).unwrap()).collect();
    let sets: Vec<LabelSet> = golds.iter().map(|(_, s)| *s).collect();
    let report = evaluate(&parsed, &sets, filter).or_data("evaluation")?;

    let dir = out.unwrap_or_else(|| cfg.io.run_dir.join("eval"));
    create_dir(&dir)?;
    write_json(&dir.join("report.json"), &json!({ "labels": filter, "report": report }))?;
    files::write_jsonl(&dir.join("per_category.jsonl"), &report.per_category)?;
    let table = report.table();
    fs::write(dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn report(metrics: &Path, columns: &[String], alpha: Option<f64>, out: Option<PathBuf>) -> Res {
    let alpha = alpha.unwrap_or(REPORT_EMA_ALPHA);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Failure::usage("--alpha must be in (0, 1)"));
    }
    let (header, rows) = files::read_csv(metrics)?;
    if header.is_empty() {
        return Err(Failure::data("metrics CSV has no columns"));
    }
    let wanted: Vec<String> = if columns.is_empty() {
        header[1..].iter().filter(|c| !c.ends_with("_ema")).cloned().collect()
    } else {
        columns.to_vec()
    };
    let mut idx = Vec::new();
    for c in &wanted {
        let j = header.iter().position(|h| h == c).ok_or_else(|| Failure::usage(format!("no column {c:?}")))?;
        idx.push(j);
    }

    let mut out_header = vec![header[0].clone()];
    for c in &wanted {
        out_header.push(c.clone());
        out_header.push(format!("{c}_ema"));
    }
    let smoothed: Vec<Vec<f64>> =
        idx.iter().map(|&j| ema(&rows.iter().map(|r| r[j]).collect::<Vec<_>>(), alpha)).collect();
    let out_rows: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![r[0]];
            for (k, &j) in idx.iter().enumerate() {
                row.push(r[j]);
                row.push(smoothed[k][i]);
            }
            row
        })
        .collect();
    match out {
        Some(path) => {
            ensure_parent(&path)?;
            files::write_csv(&path, &out_header, &out_rows)
        }
        None => files::write_csv_to(&mut io::stdout().lock(), &out_header, &out_rows).map_err(Failure::from),
    }
}
