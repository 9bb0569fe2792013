use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ftlab::corpus::{self, SplitMode};
use ftlab::eval::{self, EvalReport, EvalSuite, LocalBackend, ModelBackend, Normalization, RemoteChatBackend};
use ftlab::instructions::{self, DEFAULT_SYSTEM_PROMPT};
use ftlab::labels::{self, FixturePrices, HttpPriceSource, PriceSource};
use ftlab::lora::{self, AdapterSet};
use ftlab::model::{self, GenerationParams, Strategy, TransformerWeights};
use ftlab::tokenizer::ByteTokenizer;
use ftlab::training::{self, RegressionHead, TrainHistory, TrainTarget};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{self, BackendDef, Overrides, RunConfig};
use crate::{Cli, Command, Invalid, ModelArgs, TrainArgs};

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn timestamp(&self) -> Option<String> {
        self.cfg.timestamps.then(|| chrono::Utc::now().to_rfc3339())
    }

    fn echo(&self) -> Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    /// Attaches the resolved config and timestamp, prints the table, and
    /// writes the JSON report if asked.
    fn finish_reports(&self, reports: Vec<EvalReport>, out: Option<&Path>) -> Result<()> {
        let reports: Vec<EvalReport> = reports
            .into_iter()
            .map(|mut r| {
                r.config = json!({"metric": r.config, "run": self.echo()});
                r.stamped(self.timestamp())
            })
            .collect();
        print!("{}", eval::render_table(&reports));
        if let Some(path) = out {
            eval::write_reports(path, &reports)?;
        }
        Ok(())
    }
}

fn train_overrides(t: &TrainArgs, o: &mut Overrides) -> Result<()> {
    if let Some(v) = t.epochs {
        o.push(("train.epochs", json!(v)));
    }
    if let Some(v) = t.lr {
        o.push(("train.learning_rate", json!(v)));
    }
    if let Some(v) = t.batch_size {
        o.push(("train.batch_size", json!(v)));
    }
    if let Some(v) = &t.target {
        let target = match v.as_str() {
            "adapters" => "adapters",
            "full" => "full",
            other => bail!(Invalid(format!("--target must be adapters or full, got {other:?}"))),
        };
        o.push(("train.target", json!(target)));
    }
    if let Some(v) = t.rank {
        o.push(("lora.rank", json!(v)));
    }
    if let Some(v) = t.alpha {
        o.push(("lora.alpha", json!(v)));
    }
    if let Some(v) = t.dropout {
        o.push(("lora.dropout", json!(v)));
    }
    if let Some(v) = t.stop_below {
        o.push(("train.stop_below", json!(v)));
    }
    if let Some(v) = t.checkpoint_every {
        o.push(("train.checkpoint_every", json!(v)));
    }
    Ok(())
}

fn overrides(cli: &Cli) -> Result<Overrides> {
    let mut o: Overrides = Vec::new();
    if let Some(s) = cli.seed {
        o.push(("seed", json!(s)));
    }
    if let Some(t) = cli.threads {
        o.push(("threads", json!(t)));
    }
    if cli.no_timestamps {
        o.push(("timestamps", json!(false)));
    }
    match &cli.command {
        Command::BuildCorpus {
            chunk_len,
            test_fraction,
            cutoff,
            ..
        } => {
            if let Some(v) = chunk_len {
                o.push(("corpus.chunk_len", json!(v)));
            }
            if let Some(v) = test_fraction {
                o.push(("corpus.test_fraction", json!(v)));
            }
            if let Some(v) = cutoff {
                o.push(("corpus.cutoff", json!(v)));
            }
        }
        Command::TrainLm { chunk_len, train, .. } => {
            if let Some(v) = chunk_len {
                o.push(("corpus.chunk_len", json!(v)));
            }
            train_overrides(train, &mut o)?;
        }
        Command::TrainCls { train, .. } => train_overrides(train, &mut o)?,
        Command::Generate {
            max_new_tokens,
            temperature,
            top_k,
            ..
        } => {
            if let Some(v) = max_new_tokens {
                o.push(("generation.max_new_tokens", json!(v)));
            }
            let strategy = match (temperature, top_k) {
                (Some(t), Some(k)) => Some(Strategy::TopK { k: *k, temperature: *t }),
                (Some(t), None) => Some(Strategy::Temperature { temperature: *t }),
                _ => None,
            };
            if let Some(s) = strategy {
                o.push(("generation.strategy", serde_json::to_value(s)?));
            }
        }
        Command::EvalRouge { max_new_tokens, .. } | Command::Compare { max_new_tokens, .. } => {
            if let Some(v) = max_new_tokens {
                o.push(("generation.max_new_tokens", json!(v)));
            }
        }
        _ => {}
    }
    Ok(o)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = config::resolve(cli.config.as_deref(), overrides(&cli)?)?;
    // Kernels run on the calling thread, so any positive cap is honoured.
    log::debug!("resolved config: {}", serde_json::to_string(&cfg)?);
    let ctx = Ctx { cfg };
    match cli.command {
        Command::BuildCorpus {
            input, manifest, out_dir, ..
        } => build_corpus(&ctx, &input, manifest.as_deref(), &out_dir),
        Command::TrainLm {
            chunks,
            corpus,
            base,
            eval_chunks,
            out,
            ..
        } => train_lm(&ctx, chunks.as_deref(), corpus.as_deref(), base.as_deref(), eval_chunks.as_deref(), &out),
        Command::BuildLabels {
            headlines,
            prices,
            price_url,
            out,
            skipped,
        } => build_labels(&headlines, prices.as_deref(), price_url.as_deref(), &out, skipped.as_deref()),
        Command::TrainCls {
            data, model, eval, out, ..
        } => train_cls(&ctx, &data, &model, eval.as_deref(), &out),
        Command::Generate { model, prompt, .. } => generate(&ctx, &model, &prompt),
        Command::EvalPpl { model, chunks, report } => {
            let backend = local_backend("model", &model.model, model.adapters.as_deref())?;
            let list = corpus::read_chunks(&chunks)?;
            let r = eval::perplexity(&backend, &list, &file_stem(&chunks))?;
            ctx.finish_reports(vec![r], report.as_deref())
        }
        Command::EvalRouge {
            items,
            model,
            adapters,
            remote_url,
            remote_model,
            report,
            ..
        } => {
            let backend: Box<dyn ModelBackend> = match (model, remote_url) {
                (Some(m), _) => Box::new(local_backend("model", &m, adapters.as_deref())?),
                (None, Some(url)) => Box::new(RemoteChatBackend::new(
                    "remote",
                    url,
                    remote_model.expect("clap requires --remote-model"),
                )),
                (None, None) => unreachable!("clap requires one backend"),
            };
            let list: Vec<eval::SummaryItem> = eval::load_jsonl(&items)?;
            let r = eval::summarization_eval(backend.as_ref(), &list, &ctx.cfg.generation, &file_stem(&items))?;
            ctx.finish_reports(vec![r], report.as_deref())
        }
        Command::EvalMc {
            model,
            items,
            normalization,
            report,
        } => {
            let backend = local_backend("model", &model.model, model.adapters.as_deref())?;
            let list: Vec<eval::McItem> = eval::load_jsonl(&items)?;
            let r = eval::mc_accuracy(&backend, &list, parse_norm(&normalization)?, &file_stem(&items))?;
            ctx.finish_reports(vec![r], report.as_deref())
        }
        Command::EvalHuman {
            votes,
            models,
            questions,
            report,
        } => eval_human(&ctx, &votes, &models, questions.as_deref(), report.as_deref()),
        Command::BuildInstructions { input, out, system } => {
            let items = instructions::load_instruction_items(&input)?;
            let summary = instructions::build_jsonl(&items, system.as_deref().unwrap_or(DEFAULT_SYSTEM_PROMPT), &out)?;
            for (cat, n) in &summary.counts {
                println!("{cat}\t{n}");
            }
            println!("total\t{}", summary.total);
            if let Some(w) = &summary.warning {
                println!("warning: {w}");
            }
            Ok(())
        }
        Command::ValidateInstructions { input } => {
            let report = instructions::validate_jsonl(&input)?;
            for v in &report.violations {
                println!("{v}");
            }
            if !report.is_ok() {
                bail!(Invalid(format!(
                    "{} violation(s) in {}",
                    report.violations.len(),
                    input.display()
                )));
            }
            println!("ok: {} example(s)", report.examples);
            Ok(())
        }
        Command::Compare {
            local,
            remote,
            chunks,
            summaries,
            mc,
            normalization,
            report,
            ..
        } => {
            let suite = EvalSuite {
                perplexity: chunks
                    .as_deref()
                    .map(|p| Ok::<_, anyhow::Error>((file_stem(p), corpus::read_chunks(p)?)))
                    .transpose()?,
                summarization: summaries
                    .as_deref()
                    .map(|p| Ok::<_, anyhow::Error>((file_stem(p), eval::load_jsonl(p)?)))
                    .transpose()?,
                multiple_choice: mc
                    .as_deref()
                    .map(|p| Ok::<_, anyhow::Error>((file_stem(p), eval::load_jsonl(p)?)))
                    .transpose()?,
                normalization: parse_norm(&normalization)?,
                generation: ctx.cfg.generation.clone(),
            };
            let mut defs = ctx.cfg.backends.clone();
            for arg in &local {
                defs.push(parse_local(arg)?);
            }
            for arg in &remote {
                defs.push(parse_remote(arg)?);
            }
            let backends = defs.iter().map(make_backend).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&dyn ModelBackend> = backends.iter().map(|b| b.as_ref()).collect();
            let reports = eval::compare_backends(&refs, &suite).map_err(|e| match e {
                eval::EvalError::Contract(m) => anyhow::Error::new(Invalid(m)),
                e => e.into(),
            })?;
            ctx.finish_reports(reports, report.as_deref())
        }
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_norm(s: &str) -> Result<Normalization> {
    match s {
        "none" => Ok(Normalization::None),
        "per-token" | "per_token" => Ok(Normalization::PerToken),
        other => bail!(Invalid(format!("--normalization must be none or per-token, got {other:?}"))),
    }
}

fn parse_local(arg: &str) -> Result<BackendDef> {
    let (id, rest) = arg
        .split_once('=')
        .ok_or_else(|| Invalid(format!("--local expects id=model[,adapters], got {arg:?}")))?;
    let mut parts = rest.splitn(2, ',');
    Ok(BackendDef::Local {
        id: id.to_string(),
        model: PathBuf::from(parts.next().unwrap_or_default()),
        adapters: parts.next().map(PathBuf::from),
    })
}

fn parse_remote(arg: &str) -> Result<BackendDef> {
    let parsed = arg
        .split_once('=')
        .and_then(|(id, rest)| rest.rsplit_once(',').map(|(url, model)| (id, url, model)));
    let Some((id, url, model)) = parsed else {
        bail!(Invalid(format!("--remote expects id=url,model, got {arg:?}")));
    };
    Ok(BackendDef::Remote {
        id: id.into(),
        url: url.into(),
        model: model.into(),
    })
}

fn make_backend(def: &BackendDef) -> Result<Box<dyn ModelBackend>> {
    Ok(match def {
        BackendDef::Local { id, model, adapters } => Box::new(local_backend(id, model, adapters.as_deref())?),
        BackendDef::Remote { id, url, model } => Box::new(RemoteChatBackend::new(id.clone(), url.clone(), model.clone())),
    })
}

fn load_model(path: &Path, adapters: Option<&Path>) -> Result<(TransformerWeights, Option<AdapterSet>)> {
    let weights = model::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let set = match adapters {
        Some(p) => Some(lora::load_adapters(p).with_context(|| format!("loading {}", p.display()))?.0),
        None => None,
    };
    Ok((weights, set))
}

fn local_backend(id: &str, path: &Path, adapters: Option<&Path>) -> Result<LocalBackend> {
    let (weights, set) = load_model(path, adapters)?;
    Ok(LocalBackend::new(id, weights, set)?)
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn build_corpus(ctx: &Ctx, input: &Path, manifest: Option<&Path>, out_dir: &Path) -> Result<()> {
    let (mut articles, warnings) = corpus::load_corpus_with_warnings(input)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if let Some(m) = manifest {
        corpus::apply_manifest(&mut articles, m)?;
    }
    let c = &ctx.cfg.corpus;
    let mode = match c.cutoff {
        Some(d) => SplitMode::Cutoff(d),
        None => SplitMode::Fraction(c.test_fraction),
    };
    let (train, test) = corpus::split_corpus(&articles, mode)?;
    let tok = ByteTokenizer::new();
    let train_chunks = corpus::build_chunks(&train, &tok, c.chunk_len)?;
    let test_chunks = match corpus::build_chunks(&test, &tok, c.chunk_len) {
        Ok(ch) => ch,
        Err(corpus::CorpusError::TooSmall { found, required }) => {
            eprintln!("warning: test split has {found} tokens, fewer than one chunk of {required}; test.jsonl is empty");
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    create_dir(out_dir)?;
    corpus::write_chunks(&out_dir.join("train.jsonl"), &train_chunks)?;
    corpus::write_chunks(&out_dir.join("test.jsonl"), &test_chunks)?;
    println!(
        "articles\t{} train / {} test\nchunks\t{} train / {} test (length {})",
        train.len(),
        test.len(),
        train_chunks.len(),
        test_chunks.len(),
        c.chunk_len
    );
    Ok(())
}

fn write_history(ctx: &Ctx, out: &Path, history: &TrainHistory) -> Result<()> {
    history.write_csv(&out.join("history.csv"), ctx.cfg.timestamps)?;
    for e in &history.epochs {
        println!("epoch {:>4}  loss {:.6}", e.epoch, e.loss);
    }
    if let Some(l) = history.final_eval_loss {
        println!("eval loss {l:.6}");
    }
    Ok(())
}

fn run_log(ctx: &Ctx, out: &Path, command: &str, history: &TrainHistory, extra: Value) -> Result<()> {
    let mut entry = json!({
        "command": command,
        "config": ctx.echo(),
        "losses": history.losses(),
        "final_eval_loss": history.final_eval_loss,
        "outputs": extra,
    });
    if let Some(t) = ctx.timestamp() {
        entry["timestamp"] = json!(t);
    }
    training::append_run_log(&out.join("run.jsonl"), &entry)?;
    Ok(())
}

fn train_lm(
    ctx: &Ctx,
    chunks: Option<&Path>,
    corpus_dir: Option<&Path>,
    base: Option<&Path>,
    eval_chunks: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = match (chunks, corpus_dir) {
        (Some(p), _) => corpus::read_chunks(p)?,
        (None, Some(dir)) => {
            let articles = corpus::load_corpus(dir)?;
            corpus::build_chunks(&articles, &ByteTokenizer::new(), cfg.corpus.chunk_len)?
        }
        (None, None) => unreachable!("clap requires a data source"),
    };
    let mut weights = match base {
        Some(p) => model::load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => model::init_model(&cfg.model)?,
    };
    let mut adapters = match cfg.train.target {
        TrainTarget::Adapters => lora::attach_adapters(&weights, &cfg.lora)?,
        TrainTarget::Full => AdapterSet::empty(&weights),
    };
    create_dir(out)?;
    let mut train_cfg = cfg.train.clone();
    if train_cfg.checkpoint_every > 0 {
        train_cfg.checkpoint_dir = Some(out.join("checkpoints"));
        create_dir(&out.join("checkpoints"))?;
    }
    let mut history = training::train_lm(&mut weights, &mut adapters, &data, &train_cfg)?;
    if let Some(p) = eval_chunks {
        let held_out = corpus::read_chunks(p)?;
        history.final_eval_loss = Some(training::mean_chunk_nll(&weights, Some(&adapters), &held_out)?);
    }
    let model_path = out.join("model.ftlm");
    let adapter_path = out.join("adapters.ftla");
    model::save_checkpoint(&weights, &model_path)?;
    lora::save_adapters(&adapters, &[], &adapter_path)?;
    write_history(ctx, out, &history)?;
    let hashes = json!({
        "model.ftlm": hash_file(&model_path)?,
        "adapters.ftla": hash_file(&adapter_path)?,
    });
    println!("sha256 model.ftlm    {}", hashes["model.ftlm"].as_str().unwrap_or(""));
    println!("sha256 adapters.ftla {}", hashes["adapters.ftla"].as_str().unwrap_or(""));
    run_log(ctx, out, "train-lm", &history, hashes)
}

fn build_labels(
    headlines: &Path,
    prices: Option<&Path>,
    price_url: Option<&str>,
    out: &Path,
    skipped: Option<&Path>,
) -> Result<()> {
    let rows = labels::load_headlines_csv(headlines)?;
    let source: Box<dyn PriceSource> = match (prices, price_url) {
        (Some(p), _) => Box::new(labels::load_prices_csv(p)?),
        (None, Some(url)) => Box::new(HttpPriceSource::new(url)),
        (None, None) => Box::new(FixturePrices::default()),
    };
    let (labeled, report) = labels::build_labeled_dataset(&rows, source.as_ref())?;
    labels::write_labeled_csv(out, &labeled)?;
    if let Some(p) = skipped {
        let mut w = csv_writer(p)?;
        w.write_record(["index", "ticker", "reason"])?;
        for s in &report.skipped {
            w.write_record([s.index.to_string(), s.ticker.clone(), s.reason.as_str().to_string()])?;
        }
        w.flush()?;
    }
    println!("labeled\t{}", labeled.len());
    for (reason, n) in report.counts() {
        println!("skipped {reason}\t{n}");
    }
    Ok(())
}

fn csv_writer(p: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(csv::Writer::from_writer(f))
}

fn train_cls(ctx: &Ctx, data: &Path, model_path: &Path, eval_path: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let dataset = labels::load_labeled_csv(data)?;
    let mut weights = model::load_checkpoint(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let mut adapters = lora::attach_adapters(&weights, &cfg.lora)?;
    let mut head = RegressionHead::new(weights.config.model_dim, cfg.seed.wrapping_add(2));
    let mut history = training::train_classifier(&mut weights, &mut adapters, &mut head, &dataset, &cfg.train)?;
    let scored = match eval_path {
        Some(p) => labels::load_labeled_csv(p)?,
        None => dataset.clone(),
    };
    let metrics = training::evaluate_classifier(&weights, Some(&adapters), &head, &scored)?;
    history.final_eval_loss = Some(metrics.mse);
    create_dir(out)?;
    let cls_path = out.join("classifier.ftla");
    lora::save_adapters(&adapters, &head.named(), &cls_path)?;
    if cfg.train.target == TrainTarget::Full {
        model::save_checkpoint(&weights, &out.join("model.ftlm"))?;
    }
    write_history(ctx, out, &history)?;
    println!(
        "accuracy {:.4}  mean |code error| {:.4}  mean |raw error| {:.4}  mse {:.4}  (n = {})",
        metrics.accuracy, metrics.mean_abs_code_error, metrics.mean_abs_raw_error, metrics.mse, metrics.count
    );
    run_log(
        ctx,
        out,
        "train-cls",
        &history,
        json!({"classifier.ftla": hash_file(&cls_path)?, "metrics": metrics}),
    )
}

fn generate(ctx: &Ctx, m: &ModelArgs, prompt: &str) -> Result<()> {
    let (weights, adapters) = load_model(&m.model, m.adapters.as_deref())?;
    if let Some(a) = &adapters {
        a.check_compatible(&weights)?;
    }
    let params: &GenerationParams = &ctx.cfg.generation;
    let text = model::generate(&weights, prompt, params, adapters.as_ref())?;
    println!("{text}");
    Ok(())
}

fn eval_human(ctx: &Ctx, votes: &Path, models: &[String], questions: Option<&[String]>, out: Option<&Path>) -> Result<()> {
    let list = eval::load_votes_csv(votes)?;
    let summary = eval::aggregate_preferences(&list, models, questions)?;
    let width = models.iter().map(String::len).max().unwrap_or(5).max(5);
    println!("{:<width$}  score", "model");
    for (m, s) in &summary.scores {
        println!("{m:<width$}  {s}");
    }
    println!("{:<width$}  {}", "none", summary.abstentions);
    println!("{:<width$}  {}", "votes", summary.total_votes);
    if let Some(path) = out {
        let mut r = EvalReport::new("human_preference", &file_stem(votes), "human");
        r.samples = summary.total_votes;
        for (m, s) in &summary.scores {
            r.values.insert(m.clone(), *s as f64);
        }
        r.values.insert("abstentions".into(), summary.abstentions as f64);
        r.config = json!({"per_question": summary.per_question, "run": ctx.echo()});
        let r = r.stamped(ctx.timestamp());
        eval::write_reports(path, &[r])?;
    }
    Ok(())
}
