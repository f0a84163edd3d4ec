use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use uvlm::adapters::AdapterMode;
use uvlm::data::{
    load_image, parse_jsonl, read_tensor, Corpus, DpoExample, DpoRecord, InstructExample,
    InstructRecord, Split, MANIFEST_FILE,
};
use uvlm::eval::{
    check_reference_reductions, flops_ratio, flops_table, parse_metrics, reference_comparisons,
    render_table, run_benchmark, run_bias, BinaryBagCosine, CostModel, FlopsComparison, FlopsRow,
};
use uvlm::io::{sha256_hex, write_atomic, write_json};
use uvlm::model::{GenerationConfig, ToyVlm};
use uvlm::pipeline::{
    pretrain_llm, pretraining_text, Checkpoint, EpochSummary, Outcome, RunManifest, RunOptions,
    Session, Stage, StageConfig, StageSummary,
};

use crate::config::RunConfig;
use crate::{
    AdapterArg, Cli, Command, CostArg, DataBuildArgs, DataCommand, EvalArgs, GenerateArgs,
    SplitArg, StageArg, TrainArgs, Usage,
};

pub const OUTPUT_ROOT_ENV: &str = "UVLM_OUTPUT_ROOT";

struct Ctx {
    config: RunConfig,
    root: PathBuf,
}

impl Ctx {
    fn data_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.root.join("data"))
    }

    fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.json"))
    }

    fn partial_path(&self, stage: Stage) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{stage}.partial.json"))
    }

    fn manifest_path(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }

    fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.paper_faithful |= cli.paper_faithful;
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .or_else(|| config.output_root.clone())
        .unwrap_or_else(|| PathBuf::from("uvlm-runs"));
    let ctx = Ctx { config, root };
    match cli.command {
        Command::Data(DataCommand::Build(a)) => data_build(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
    }
}

fn data_build(ctx: &Ctx, a: DataBuildArgs) -> Result<()> {
    let dir = ctx.data_dir(&a.dir);
    let mut cfg = ctx.config.corpus();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.paper_proportions |= a.paper_proportions;
    let occupied = fs::read_dir(&dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied {
        if !a.force {
            return Err(Usage(format!(
                "{} is not empty; pass --force to replace it",
                dir.display()
            ))
            .into());
        }
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Usage(format!(
                "{} holds no corpus; refusing to delete it even with --force",
                dir.display()
            ))
            .into());
        }
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let corpus = Corpus::generate(&cfg)?;
    let manifest = corpus.write(&dir)?;
    let mut run = RunManifest::new(
        "data build",
        json!({ "run": ctx.resolved(), "corpus": cfg }),
    );
    run.seeds.insert("corpus".into(), cfg.seed);
    run.dataset_digests
        .insert("corpus".into(), manifest.digest());
    run.save(&ctx.manifest_path("data-build"))?;
    let n = |s: &str| {
        manifest
            .counts
            .get(s)
            .map_or(0, |c| c.train + c.val + c.test)
    };
    println!(
        "corpus {}: pt {} instruct {} dpo {} regularizer {} (digest {})",
        dir.display(),
        n("pt"),
        n("instruct"),
        n("dpo"),
        n("regularizer"),
        &manifest.digest()[..16]
    );
    Ok(())
}

fn stage_of(s: StageArg) -> Stage {
    match s {
        StageArg::Align => Stage::Align,
        StageArg::Instruct => Stage::Instruct,
        StageArg::Dpo => Stage::Dpo,
    }
}

fn load_session(path: &Path) -> Result<Session> {
    let ck = Checkpoint::load(path)?;
    Ok(ck.into_session()?)
}

/// A pretrained base model with no adapters, ready for stage 1.
fn base_model(ctx: &Ctx, corpus: &Corpus, manifest: &mut RunManifest) -> Result<Session> {
    let tok = corpus.tokenizer();
    let mcfg = ctx.config.model(tok.vocab_size());
    let mut model = ToyVlm::new(mcfg.clone(), tok)?;
    let pcfg = ctx.config.pretrain();
    let losses = pretrain_llm(
        &mut model,
        &pretraining_text(corpus, Some(Split::Train)),
        &pcfg,
    )?;
    println!(
        "pretrained base LLM for {} epochs, final loss {:.4}",
        pcfg.epochs,
        losses[losses.len() - 1]
    );
    manifest.seeds.insert("model".into(), mcfg.seed);
    manifest.seeds.insert("pretrain".into(), pcfg.seed);
    manifest
        .metrics
        .insert("pretrain_final_loss".into(), losses[losses.len() - 1]);
    if let serde_json::Value::Object(m) = &mut manifest.config {
        m.insert("model".into(), serde_json::to_value(&mcfg)?);
        m.insert("pretrain".into(), serde_json::to_value(&pcfg)?);
    }
    Ok(Session::new(model))
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let stage = stage_of(a.stage);
    let corpus = Corpus::load(&ctx.data_dir(&a.data))?;
    let mut manifest = RunManifest::new(
        format!("train --stage {stage}"),
        json!({ "run": ctx.resolved() }),
    );
    manifest
        .dataset_digests
        .insert("corpus".into(), corpus.manifest().digest());
    let partial = ctx.partial_path(stage);

    let mut session = if a.resume {
        let s = load_session(&partial).context("nothing to resume")?;
        match &s.progress {
            Some(p) if p.stage == stage => s,
            _ => {
                return Err(Usage(format!(
                    "{} holds no interrupted {stage} run",
                    partial.display()
                ))
                .into())
            }
        }
    } else {
        let from = a
            .from
            .clone()
            .or_else(|| stage.previous().map(|p| ctx.checkpoint_path(p)));
        match from {
            Some(path) if path.exists() => load_session(&path)?,
            Some(path) if a.from.is_some() => {
                return Err(Usage(format!("checkpoint {} does not exist", path.display())).into())
            }
            _ if stage == Stage::Align || a.allow_skip => base_model(ctx, &corpus, &mut manifest)?,
            _ => {
                let prev = stage.previous().expect("only align has no predecessor");
                return Err(uvlm::Error::PipelineOrder(format!(
                    "stage {stage} needs a completed {prev} stage; run `uvlm train --stage {prev}` first or pass --allow-skip"
                ))
                .into());
            }
        }
    };

    let n_layers = session.model.config().n_layers;
    let requested = a.adapter.map(|m| match m {
        AdapterArg::Lora => AdapterMode::SingleLora,
        AdapterArg::Mole => AdapterMode::Mole,
    });
    let plan = match (session.model.adapter_plan(), requested) {
        (Some(existing), Some(mode))
            if existing.mode != mode && !ctx.config.dpo.reset_adapters.unwrap_or(false) =>
        {
            return Err(Usage(format!(
                "the checkpoint carries {} adapters, not {mode}",
                existing.mode
            ))
            .into());
        }
        (Some(existing), None) => Some(existing.clone()),
        (_, mode) if stage != Stage::Align => Some(
            ctx.config
                .adapter(mode.unwrap_or(AdapterMode::SingleLora), n_layers),
        ),
        _ => None,
    };
    let cfg = match &session.progress {
        Some(p) => p.config.clone(),
        None => ctx.config.stage(stage, plan),
    };
    manifest.seeds.insert(stage.to_string(), cfg.seed);
    if let serde_json::Value::Object(m) = &mut manifest.config {
        m.insert("stage".into(), serde_json::to_value(&cfg)?);
    }

    let mut report =
        |s: &EpochSummary| println!("{} epoch {} loss {:.4}", s.stage, s.epoch, s.mean_loss);
    let opts = RunOptions {
        max_batches: a.max_batches,
        checkpoint_every: a.checkpoint_every.map(|n| (n, partial.clone())),
        allow_skip: a.allow_skip,
        on_epoch: Some(&mut report),
    };
    let outcome = run_stage(&mut session, &corpus, stage, &cfg, opts)?;
    match outcome {
        Outcome::Interrupted { batches_done, .. } => {
            session.checkpoint().save(&partial)?;
            println!("{stage} interrupted after {batches_done} batches; continue with --resume");
        }
        Outcome::Completed(record) => {
            let out = ctx.checkpoint_path(stage);
            let ck = session.checkpoint();
            ck.save(&out)?;
            if partial.exists() {
                fs::remove_file(&partial)
                    .with_context(|| format!("removing {}", partial.display()))?;
            }
            manifest.stages = session.provenance.iter().map(StageSummary::from).collect();
            if let Some(l) = record.final_loss() {
                manifest.metrics.insert(format!("{stage}_final_loss"), l);
            }
            let digest = ck.digest()?;
            manifest.checkpoint_digest = Some(digest.clone());
            manifest.save(&ctx.manifest_path(&format!("train-{stage}")))?;
            println!(
                "{stage} done: final loss {:.4}, checkpoint {} ({})",
                record.final_loss().unwrap_or(f64::NAN),
                out.display(),
                &digest[..16]
            );
        }
    }
    Ok(())
}

fn run_stage(
    session: &mut Session,
    corpus: &Corpus,
    stage: Stage,
    cfg: &StageConfig,
    opts: RunOptions,
) -> Result<Outcome> {
    let train = Some(Split::Train);
    Ok(match stage {
        Stage::Align => session.stage1_align(&corpus.pt_examples(train), cfg, opts)?,
        Stage::Instruct => session.stage2_instruct(
            &corpus.instruct_examples(train),
            &corpus.regularizer_examples(train),
            cfg,
            opts,
        )?,
        Stage::Dpo => session.stage3_dpo(&corpus.dpo_examples(train), cfg, opts)?,
    })
}

fn gen_config(ctx: &Ctx, flag: Option<usize>) -> GenerationConfig {
    let mut g = GenerationConfig::default();
    if let Some(n) = flag.or(ctx.config.eval.max_new_tokens) {
        g.max_new_tokens = n;
    }
    g
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let session = load_session(&a.checkpoint)?;
    let image = read_tensor(&a.image)?;
    let g =
        session
            .model
            .generate_greedy(&image, &a.question, gen_config(ctx, a.max_new_tokens))?;
    if a.json {
        let tok = session.model.tokenizer();
        let tokens: Vec<&str> = g.ids.iter().map(|&i| tok.token(i).unwrap_or("")).collect();
        let out = json!({ "question": a.question, "text": g.text, "ids": g.ids, "tokens": tokens });
        println!("{}", serde_json::to_string(&out)?);
    } else {
        println!("{}", g.text);
    }
    Ok(())
}

fn split_filter(s: SplitArg) -> Option<Split> {
    match s {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| uvlm::Error::io(path, e))?;
    Ok(parse_jsonl(&text, path)?)
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn write_report<T: Serialize>(ctx: &Ctx, name: &str, value: &T, table: &str) -> Result<()> {
    write_json(&ctx.report_path(&format!("{name}.json")), value)?;
    write_atomic(&ctx.report_path(&format!("{name}.txt")), table.as_bytes())?;
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    if a.flops {
        eval_flops(ctx, &a)?;
        if !a.bias && a.checkpoint.is_none() {
            return Ok(());
        }
    }
    let ck_path = a
        .checkpoint
        .clone()
        .ok_or_else(|| Usage("scoring needs --checkpoint".into()))?;
    let ck = Checkpoint::load(&ck_path)?;
    let ck_digest = ck.digest()?;
    let session = ck.into_session()?;
    let gen = gen_config(ctx, a.max_new_tokens);
    let config_digest = sha256_hex(serde_json::to_string(&ctx.config)?.as_bytes());
    let keep = split_filter(a.split);
    if a.bias {
        let file = a
            .benchmark
            .clone()
            .unwrap_or_else(|| ctx.data_dir(&None).join("dpo.jsonl"));
        let dir = base_dir(&file);
        let records: Vec<DpoRecord> = read_records(&file)?;
        let data = records
            .iter()
            .filter(|r| keep.is_none_or(|s| r.split == s))
            .map(|r| {
                Ok(DpoExample {
                    id: r.id.clone(),
                    image: load_image(dir, &r.image)?,
                    question: r.question.clone(),
                    chosen: r.chosen.clone(),
                    rejected: r.rejected.clone(),
                })
            })
            .collect::<uvlm::Result<Vec<_>>>()?;
        let rule = ctx.config.bias_rule();
        let (entries, report) = run_bias(&session.model, &data, &rule, &BinaryBagCosine, gen)?;
        let header = ["entries", "zeroed", "P", "R", "F1", "Sim", "Overall"]
            .map(String::from)
            .to_vec();
        let row = vec![
            report.entries.to_string(),
            report.zeroed.to_string(),
            format!("{:.3}", report.precision),
            format!("{:.3}", report.recall),
            format!("{:.3}", report.f1),
            format!("{:.3}", report.similarity),
            format!("{:.3}", report.overall),
        ];
        let out = json!({
            "checkpoint_digest": ck_digest,
            "config_digest": config_digest,
            "rule": rule,
            "report": report,
            "entries": entries,
        });
        write_report(ctx, "bias", &out, &render_table(&[header, row]))?;
        println!(
            "bias: {} entries, {} zeroed, F1 {:.3}, similarity {:.3}, overall {:.3}",
            report.entries, report.zeroed, report.f1, report.similarity, report.overall
        );
        return Ok(());
    }
    let file = a
        .benchmark
        .clone()
        .unwrap_or_else(|| ctx.data_dir(&None).join("instruct.jsonl"));
    let dir = base_dir(&file);
    let records: Vec<InstructRecord> = read_records(&file)?;
    let data = records
        .iter()
        .filter(|r| keep.is_none_or(|s| r.split == s))
        .map(|r| {
            Ok(InstructExample {
                id: r.id.clone(),
                image: load_image(dir, &r.image)?,
                question: r.question.clone(),
                answer: r.answer.clone(),
                source_tag: r.source_tag,
            })
        })
        .collect::<uvlm::Result<Vec<_>>>()?;
    let names = a
        .metrics
        .clone()
        .or_else(|| ctx.config.eval.metrics.clone())
        .unwrap_or_else(|| vec!["rouge1".into(), "rouge_l".into(), "similarity".into()]);
    let metrics = parse_metrics(&names)?;
    let (items, mut report) = run_benchmark(&session.model, &data, &metrics, gen)?;
    report.checkpoint_digest = Some(ck_digest);
    report.config_digest = Some(config_digest);
    let out = json!({ "report": report, "responses": items });
    write_report(ctx, "benchmark", &out, &report.to_table())?;
    let all = &report.all;
    let f1 = all.rouge1.or(all.rouge_l).map(|s| s.f1);
    println!(
        "benchmark: {} entries over {} tasks{}",
        all.count,
        report.tasks.len(),
        f1.map(|f| format!(", F1 {f:.3}")).unwrap_or_default()
    );
    Ok(())
}

fn eval_flops(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let cost_model = match a.cost_model {
        CostArg::Linear => CostModel::Linear,
        CostArg::Quadratic => CostModel::Quadratic {
            attention: a.attention,
        },
    };
    check_reference_reductions()?;
    let mut rows = reference_comparisons(cost_model)?;
    if let Some(v) = &a.compare {
        let comparison = FlopsComparison {
            base_params: v[0],
            base_tokens: v[1],
            ours_params: v[2],
            ours_tokens: v[3],
            cost_model,
        };
        rows.push(FlopsRow {
            ours: "custom".into(),
            baseline: "custom".into(),
            computed: flops_ratio(&comparison)?,
            comparison,
            reference: None,
        });
    }
    let table = flops_table(&rows);
    let out = json!({
        "cost_model": cost_model,
        "note": "reference factors are published values; their cost model is not stated, so only the claim that each exceeds 1 is checked",
        "rows": rows,
    });
    write_report(ctx, "flops", &out, &table)?;
    print!("{table}");
    Ok(())
}
