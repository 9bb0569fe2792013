//! The acceptance suite: one PASS/FAIL line per criterion, nonzero exit if
//! any fails. Run with `cargo test -p ftlab --test acceptance`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use ftlab::checkpoint::{ADAPTER_MAGIC, MODEL_MAGIC};
use ftlab::corpus::{build_chunks, token_stream, Article, TokenChunk};
use ftlab::eval::{
    aggregate_preferences, mc_accuracy, mc_predict, perplexity, rouge_l, rouge_n, Capability, LocalBackend,
    McItem, ModelBackend, Normalization, PreferenceVote, Result as EvalResult,
};
use ftlab::instructions::{
    build_jsonl, load_instruction_items, validate_bytes, validate_jsonl, ViolationKind, DEFAULT_SYSTEM_PROMPT,
};
use ftlab::labels::{bucket_of, code_to_bucket, Headline, LabeledHeadline, ReturnBucket};
use ftlab::lora::{adapters_from_bytes, adapters_to_bytes, merge, AdapterSet};
use ftlab::model::{
    randomize_weights, sequence_logprobs, weights_from_bytes, weights_to_bytes, GenerationParams,
};
use ftlab::tokenizer::{ByteTokenizer, TokenId, BYTE_VOCAB_SIZE};
use ftlab::training::{
    evaluate_classifier, mean_chunk_nll, train_classifier, train_lm, RegressionHead, TrainConfig, TrainTarget,
};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use common::{adapters_for, desk_config, kernel_case, random_ids, rng, seeded_model, UniformStub, KERNELS};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn sha(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn article(id: &str, text: String) -> Article {
    Article {
        source_id: id.to_string(),
        text,
        date: None,
    }
}

fn fixture_chunks(name: &str, chunk_len: usize) -> Vec<TokenChunk> {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    build_chunks(&[article(name, text)], &ByteTokenizer::new(), chunk_len).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for i in 0..100u64 {
        let name = KERNELS[i as usize % KERNELS.len()];
        let err = kernel_case(name, i);
        ensure!(err.is_finite() && err <= 1e-3, "instance {i} ({name}): relative error {err:.3e}");
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("100 instances, worst {:.2e} ({}), {secs:.1}s", worst.0, worst.1))
}

fn lora_identity() -> Outcome {
    let mut r = rng(2);
    let mut w = seeded_model(desk_config(32, 32, 2), 2);
    randomize_weights(&mut w, 0.2, &mut r);
    let set = adapters_for(&w, 4, 3);
    for a in set.adapters() {
        ensure!(a.b.data().iter().all(|&x| x == 0.0), "fresh B is not zero");
    }
    for p in 0..20 {
        let len = r.random_range(1..=32);
        let ids = random_ids(len, &mut r);
        let base = w.forward(&ids, None).unwrap();
        let with = w.forward(&ids, Some(&set)).unwrap();
        let same = base.data().iter().zip(with.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "prompt {p}: logits differ");
    }
    Ok("20 prompts bit-identical".into())
}

fn merge_equivalence() -> Outcome {
    let mut r = rng(3);
    let mut w = seeded_model(desk_config(32, 32, 2), 3);
    let mut set = adapters_for(&w, 4, 4);
    let before = sha(&weights_to_bytes(&w));
    // 10 chunks, batch 1, 5 epochs: 50 optimizer steps.
    let chunks: Vec<TokenChunk> = (0..10)
        .map(|_| TokenChunk {
            ids: random_ids(32, &mut r),
            sources: vec!["random".into()],
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 1,
        learning_rate: 1e-2,
        seed: 3,
        ..Default::default()
    };
    let history = train_lm(&mut w, &mut set, &chunks, &cfg).unwrap();
    ensure!(history.epochs.len() == 5, "ran {} epochs", history.epochs.len());
    let after = sha(&weights_to_bytes(&w));
    ensure!(before == after, "frozen base changed: {before} -> {after}");
    ensure!(
        set.adapters().iter().any(|a| a.b.data().iter().any(|&x| x != 0.0)),
        "adapters did not move"
    );
    let merged = merge(&w, &set).unwrap();
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let ids = random_ids(r.random_range(1..=32), &mut r);
        let a = w.forward(&ids, Some(&set)).unwrap();
        let m = merged.forward(&ids, None).unwrap();
        for (x, y) in a.data().iter().zip(m.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= 1e-4, "max logit difference {worst:.3e}");
    Ok(format!("max |diff| {worst:.2e}; base hash unchanged after 50 steps"))
}

fn chunking() -> Outcome {
    let tok = ByteTokenizer::new();
    let alphabet: Vec<char> = "abc xyz.,\n€é→".chars().collect();
    for case in 0..50u64 {
        let mut r = rng(100 + case);
        let articles: Vec<Article> = (0..r.random_range(1..12))
            .map(|i| {
                let n = r.random_range(0..900);
                let text: String = (0..n).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect();
                article(&format!("a{i}.txt"), text)
            })
            .collect();
        let stream = token_stream(&articles, &tok);
        match build_chunks(&articles, &tok, 512) {
            Ok(chunks) => {
                ensure!(
                    chunks.len() == stream.len() / 512,
                    "case {case}: {} chunks for {} tokens",
                    chunks.len(),
                    stream.len()
                );
                ensure!(chunks.iter().all(|c| c.ids.len() == 512), "case {case}: ragged chunk");
                let joined: Vec<TokenId> = chunks.iter().flat_map(|c| c.ids.iter().copied()).collect();
                ensure!(joined[..] == stream[..joined.len()], "case {case}: concatenation is not a prefix");
            }
            Err(_) => ensure!(stream.len() < 512, "case {case}: rejected {} tokens", stream.len()),
        }
    }
    Ok("50 randomized corpora".into())
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let train = fixture_chunks("overfit.txt", 128);
    let held = fixture_chunks("heldout.txt", 128);
    let size = std::fs::metadata(fixture("overfit.txt")).unwrap().len();
    ensure!(size <= 4096, "corpus is {size} bytes");
    let mut w = seeded_model(desk_config(128, 64, 2), 1);
    let mut none = AdapterSet::empty(&w);
    let baseline = mean_chunk_nll(&w, None, &held).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 1,
        learning_rate: 5e-4,
        weight_decay: 0.01,
        seed: 1,
        stop_below: Some(0.5),
        target: TrainTarget::Full,
        ..Default::default()
    };
    let history = train_lm(&mut w, &mut none, &train, &cfg).unwrap();
    let final_nll = mean_chunk_nll(&w, None, &train).unwrap();
    let tuned = mean_chunk_nll(&w, None, &held).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let epochs = history.epochs.len();
    ensure!(final_nll < 0.5, "train NLL {final_nll:.3} after {epochs} epochs");
    ensure!(secs < 300.0, "took {secs:.0}s");
    ensure!(
        tuned < baseline,
        "held-out perplexity {:.1} not below baseline {:.1}",
        tuned.exp(),
        baseline.exp()
    );
    Ok(format!(
        "train NLL {final_nll:.3} at epoch {epochs}, held-out ppl {:.1} vs baseline {:.1}, {secs:.0}s",
        tuned.exp(),
        baseline.exp()
    ))
}

fn perplexity_oracle() -> Outcome {
    let mut r = rng(6);
    let chunks: Vec<TokenChunk> = (0..5)
        .map(|_| TokenChunk {
            ids: random_ids(r.random_range(2..64), &mut r),
            sources: vec![],
        })
        .collect();
    let stub = UniformStub { vocab: BYTE_VOCAB_SIZE };
    let rep = perplexity(&stub, &chunks, "random").map_err(|e| e.to_string())?;
    let ppl = rep.value("perplexity").unwrap();
    ensure!((ppl - 259.0).abs() <= 1e-3, "uniform perplexity {ppl}");

    let w = seeded_model(desk_config(64, 16, 1), 6);
    let backend = LocalBackend::new("local", w.clone(), None).unwrap();
    let rep = perplexity(&backend, &chunks, "random").map_err(|e| e.to_string())?;
    let (mut total, mut count) = (0.0, 0);
    for c in &chunks {
        let lp = sequence_logprobs(&w, &c.ids, None).unwrap();
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    let expected = (total / count as f64).exp();
    let got = rep.value("perplexity").unwrap();
    ensure!((got - expected).abs() <= 1e-9 * expected, "{got} vs exp(mean NLL) {expected}");
    ensure!(
        (got - rep.value("mean_nll").unwrap().exp()).abs() <= 1e-9 * expected,
        "report perplexity disagrees with its own mean NLL"
    );
    Ok(format!("uniform {ppl:.6}; local {got:.4} = exp(mean NLL)"))
}

fn bucketing() -> Outcome {
    let mut prev = i32::MIN;
    for i in 0..=200 {
        let r = i as f64 / 10.0 - 10.0;
        let b = bucket_of(r).map_err(|e| format!("{r}: {e}"))?;
        let c = b.code();
        ensure!((-6..=6).contains(&c) && c != 0, "{r} -> code {c}");
        ensure!(c >= prev, "not monotone at {r}: {prev} then {c}");
        ensure!(code_to_bucket(c as i64) == b, "code {c} does not round-trip");
        prev = c;
    }
    let b = bucket_of(-5.7).unwrap();
    ensure!(b.code() == -6, "-5.7 -> {}", b.code());
    ensure!(code_to_bucket(-6) == ReturnBucket::D5Plus, "code -6 -> {}", code_to_bucket(-6));
    ensure!(ReturnBucket::D5Plus.label() == "D5+", "label {}", ReturnBucket::D5Plus.label());
    Ok("201 points, codes -6..-1, 1..6".into())
}

fn marker_headlines() -> Vec<LabeledHeadline> {
    let markers = [
        ("zq", ReturnBucket::D5Plus),
        ("kx", ReturnBucket::D2),
        ("vj", ReturnBucket::U1),
        ("wy", ReturnBucket::U4),
    ];
    let fillers = ["shares slip", "outlook held", "margin grows", "deal talks"];
    let date = chrono::NaiveDate::from_ymd_opt(2024, 1, 2).unwrap();
    let mut out = Vec::new();
    for (m, bucket) in markers {
        for f in fillers {
            out.push(LabeledHeadline {
                headline: Headline {
                    text: format!("{m} {f}"),
                    ticker: "T".into(),
                    date,
                },
                return_pct: 0.0,
                bucket,
            });
        }
    }
    out
}

fn classifier() -> Outcome {
    let data = marker_headlines();
    let d = 32;
    let mut w = seeded_model(desk_config(64, d, 2), 1);
    let mut set = adapters_for(&w, 8, 1);
    let mut head = RegressionHead::new(d, 1);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: data.len(),
        learning_rate: 3e-2,
        weight_decay: 0.0,
        clip_norm: 0.0,
        seed: 1,
        stop_below: Some(0.01),
        ..Default::default()
    };
    let history = train_classifier(&mut w, &mut set, &mut head, &data, &cfg).unwrap();
    let m = evaluate_classifier(&w, Some(&set), &head, &data).unwrap();
    let codes: Vec<f64> = data.iter().map(|r| r.bucket.code() as f64).collect();
    let mean = codes.iter().sum::<f64>() / codes.len() as f64;
    let variance = codes.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / codes.len() as f64;
    let epochs = history.epochs.len();
    ensure!(epochs <= 200, "{epochs} epochs");
    ensure!(m.mean_abs_code_error < 0.5, "mean abs code error {}", m.mean_abs_code_error);
    ensure!(m.accuracy == 1.0, "accuracy {}", m.accuracy);
    ensure!(m.mse <= variance, "mse {} above code variance {variance}", m.mse);
    Ok(format!(
        "{epochs} epochs, accuracy {}, code error {}, mse {:.4} (variance {variance:.2})",
        m.accuracy, m.mean_abs_code_error, m.mse
    ))
}

fn rouge() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let s = rouge_n("the cat sat", "the cat", 1).unwrap();
    ensure!(close(s.recall, 1.0) && close(s.precision, 2.0 / 3.0) && close(s.f1, 0.8), "{s:?}");
    let s = rouge_n("a a a", "a", 1).unwrap();
    ensure!(close(s.precision, 1.0 / 3.0) && close(s.recall, 1.0) && close(s.f1, 0.5), "{s:?}");
    let s = rouge_l("a b c d", "a c d");
    ensure!(close(s.recall, 1.0) && close(s.precision, 0.75) && close(s.f1, 6.0 / 7.0), "{s:?}");
    let words = ["a", "b", "c", "rates", "Rise", "fell,", "2%"];
    let mut r = rng(9);
    let text = |r: &mut rand_chacha::ChaCha8Rng| {
        (0..r.random_range(0..10)).map(|_| words[r.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    for _ in 0..500 {
        let (c, refr) = (text(&mut r), text(&mut r));
        for n in 1..=3 {
            let s = rouge_n(&c, &refr, n).unwrap();
            for v in [s.precision, s.recall, s.f1] {
                ensure!((0.0..=1.0).contains(&v), "rouge-{n} {v} for {c:?} / {refr:?}");
            }
        }
        let s = rouge_l(&c, &refr);
        for v in [s.precision, s.recall, s.f1] {
            ensure!((0.0..=1.0).contains(&v), "rouge-L {v} for {c:?} / {refr:?}");
        }
    }
    Ok("hand examples exact; 500 random pairs in [0,1]".into())
}

/// Puts all its probability on the gold answer's tokens.
struct GoldStub {
    gold: HashMap<Vec<TokenId>, Vec<TokenId>>,
}

impl ModelBackend for GoldStub {
    fn id(&self) -> &str {
        "gold"
    }
    fn supports(&self, _: Capability) -> bool {
        true
    }
    fn continuation_logprobs(&self, context: &[TokenId], c: &[TokenId]) -> EvalResult<Vec<f64>> {
        let hit = self.gold.get(context).is_some_and(|g| g == c);
        Ok(vec![if hit { 0.0 } else { -5.0 }; c.len()])
    }
    fn generate(&self, _: &str, _: &GenerationParams) -> EvalResult<String> {
        Ok(String::new())
    }
}

fn multiple_choice() -> Outcome {
    let tok = ByteTokenizer::new();
    let mut r = rng(10);
    let vocab = ["up", "down", "flat", "rally", "sell-off", "x", "a longer answer"];
    let items: Vec<McItem> = (0..40)
        .map(|i| {
            let n = r.random_range(2..5);
            let choices: Vec<String> = (0..n).map(|_| vocab[r.random_range(0..vocab.len())].to_string()).collect();
            McItem {
                id: format!("q{i}"),
                question: format!("Question {i}?"),
                gold: r.random_range(0..n),
                choices,
            }
        })
        .collect();
    // Distinct questions keep the stub's lookup unambiguous.
    let mut gold = HashMap::new();
    for it in &items {
        let mut ctx = vec![ftlab::tokenizer::BOS_ID];
        ctx.extend(tok.encode(&it.question));
        gold.insert(ctx, tok.encode(&format!(" {}", it.choices[it.gold])));
    }
    let stub = GoldStub { gold };
    // Duplicate choice strings would make the gold stub ambiguous.
    let unique: Vec<McItem> = items
        .iter()
        .filter(|it| {
            let g = &it.choices[it.gold];
            it.choices.iter().filter(|c| *c == g).count() == 1
        })
        .cloned()
        .collect();
    for norm in [Normalization::None, Normalization::PerToken] {
        let acc = mc_accuracy(&stub, &unique, norm, "random").map_err(|e| e.to_string())?;
        ensure!(acc.value("accuracy") == Some(1.0), "gold stub accuracy {:?} ({norm:?})", acc.value("accuracy"));
    }

    let uniform = UniformStub { vocab: BYTE_VOCAB_SIZE };
    let ln_v = (BYTE_VOCAB_SIZE as f64).ln();
    let (mut raw_hits, mut tok_hits) = (0, 0);
    for it in &items {
        // Brute force: the shortest choice has the highest summed score, and
        // every per-token score ties; the lowest index breaks ties.
        let lens: Vec<usize> = it.choices.iter().map(|c| tok.encode(&format!(" {c}")).len()).collect();
        let min = *lens.iter().min().unwrap();
        let raw_pred = lens.iter().position(|&l| l == min).unwrap();
        let raw_scores: Vec<f64> = lens.iter().map(|&l| -(l as f64) * ln_v).collect();
        ensure!(mc_predict(&raw_scores) == raw_pred, "{}: raw prediction", it.id);
        raw_hits += usize::from(raw_pred == it.gold);
        tok_hits += usize::from(it.gold == 0);
    }
    let n = items.len() as f64;
    let rep = mc_accuracy(&uniform, &items, Normalization::None, "random").map_err(|e| e.to_string())?;
    ensure!(rep.value("accuracy_raw") == Some(raw_hits as f64 / n), "uniform raw accuracy {:?}", rep.value("accuracy_raw"));
    ensure!(
        rep.value("accuracy_per_token") == Some(tok_hits as f64 / n),
        "uniform per-token accuracy {:?}",
        rep.value("accuracy_per_token")
    );

    for _ in 0..1000 {
        let n = r.random_range(1..8);
        // Integer scores keep shifted values exact, so ties survive the shift.
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-20..0) as f64).collect();
        let shift = r.random_range(-1000..1000) as f64;
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        ensure!(mc_predict(&scores) == mc_predict(&shifted), "shift {shift} changed argmax of {scores:?}");
    }
    Ok(format!("gold stub 1.0 on {} items; uniform matches brute force; shift-invariant", unique.len()))
}

fn preferences() -> Outcome {
    let models: Vec<String> = ["base", "tuned", "remote"].map(String::from).to_vec();
    for case in 0..50u64 {
        let mut r = rng(200 + case);
        let mut pairs: Vec<(usize, usize)> = (0..8).flat_map(|e| (0..10).map(move |q| (e, q))).collect();
        pairs.shuffle(&mut r);
        pairs.truncate(r.random_range(0..pairs.len()));
        let votes: Vec<PreferenceVote> = pairs
            .iter()
            .map(|&(e, q)| PreferenceVote {
                evaluator: format!("e{e}"),
                question: format!("q{q}"),
                model: if r.random_bool(0.2) { None } else { Some(models[r.random_range(0..3)].clone()) },
            })
            .collect();
        let s = aggregate_preferences(&votes, &models, None).map_err(|e| e.to_string())?;
        let mut recount: BTreeMap<&str, usize> = models.iter().map(|m| (m.as_str(), 0)).collect();
        let mut none = 0;
        for v in &votes {
            match &v.model {
                Some(m) => *recount.get_mut(m.as_str()).unwrap() += 1,
                None => none += 1,
            }
        }
        for (m, score) in &s.scores {
            ensure!(recount[m.as_str()] == *score, "case {case}: {m} scored {score}, recount {}", recount[m.as_str()]);
        }
        ensure!(s.abstentions == none, "case {case}: abstentions");
        let sum: usize = s.scores.iter().map(|(_, c)| c).sum();
        ensure!(sum + s.abstentions == votes.len(), "case {case}: {sum} + {} != {}", s.abstentions, votes.len());
    }
    let all_none: Vec<PreferenceVote> = (0..6)
        .map(|i| PreferenceVote {
            evaluator: format!("e{i}"),
            question: "q".into(),
            model: None,
        })
        .collect();
    let s = aggregate_preferences(&all_none, &models, None).map_err(|e| e.to_string())?;
    ensure!(s.scores.iter().all(|(_, c)| *c == 0), "all-none scores {:?}", s.scores);
    ensure!(s.abstentions == 6, "all-none abstentions {}", s.abstentions);
    Ok("50 random fixtures recounted; all-none gives zeros".into())
}

fn instructions() -> Outcome {
    let items = load_instruction_items(&fixture("instructions.csv")).map_err(|e| e.to_string())?;
    ensure!(items.len() == 30, "fixture has {} items", items.len());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.jsonl");
    build_jsonl(&items, DEFAULT_SYSTEM_PROMPT, &out).map_err(|e| e.to_string())?;
    let report = validate_jsonl(&out).map_err(|e| e.to_string())?;
    ensure!(report.is_ok() && report.examples == 30, "{:?}", report.violations);

    let good: Vec<Vec<u8>> = std::fs::read(&out).unwrap().split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(<[u8]>::to_vec).collect();
    let seeded: [(usize, &[u8], ViolationKind); 7] = [
        (3, b"", ViolationKind::Blank),
        (7, b"{\"messages\": [", ViolationKind::Json),
        (10, b"\xff\xfe not text", ViolationKind::Encoding),
        (14, br#"{"messages":[{"role":"user","content":"q"},{"role":"assistant","content":"a"}]}"#, ViolationKind::RoleOrder),
        (19, br#"{"messages":[{"role":"system","content":"s"},{"role":"user","content":"  "},{"role":"assistant","content":"a"}]}"#, ViolationKind::EmptyContent),
        (23, br#"{"prompt":"q","completion":"a"}"#, ViolationKind::Structure),
        (28, b"", ViolationKind::LineEnding),
    ];
    let mut lines = good.clone();
    for (line, bytes, kind) in &seeded {
        if *kind == ViolationKind::LineEnding {
            lines[line - 1].push(b'\r');
        } else {
            lines[line - 1] = bytes.to_vec();
        }
    }
    let mut text = lines.join(&b'\n');
    text.push(b'\n');
    let report = validate_bytes(&text);
    let mut got: Vec<(usize, ViolationKind)> = report.violations.iter().map(|v| (v.line, v.kind)).collect();
    got.dedup();
    let want: Vec<(usize, ViolationKind)> = seeded.iter().map(|(l, _, k)| (*l, *k)).collect();
    ensure!(got == want, "violations {got:?}, expected {want:?}");
    Ok(format!("30 items build and validate; {} seeded violations at the right lines", want.len()))
}

fn checkpoints() -> Outcome {
    let mut r = rng(13);
    let mut w = seeded_model(desk_config(8, 8, 1), 13);
    randomize_weights(&mut w, 1.0, &mut r);
    let bytes = weights_to_bytes(&w);
    let back = weights_from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure!(weights_to_bytes(&back) == bytes, "model bytes differ after round trip");
    for ((n, a), (_, b)) in w.named_params().iter().zip(back.named_params()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same && a.shape() == b.shape(), "parameter {n} differs");
    }
    let mut set = adapters_for(&w, 2, 14);
    for a in set.adapters_mut() {
        a.b = common::randn(a.b.shape(), 1.0, &mut r);
    }
    let head = RegressionHead::new(8, 1);
    let abytes = adapters_to_bytes(&set, &head.named());
    let (aback, xback) = adapters_from_bytes(&abytes).map_err(|e| e.to_string())?;
    let xrefs: Vec<(String, &ftlab::tensor::Tensor)> = xback.iter().map(|(n, t)| (n.clone(), t)).collect();
    ensure!(adapters_to_bytes(&aback, &xrefs) == abytes, "adapter bytes differ after round trip");

    let mut flips = 0;
    for (what, original, magic) in [("model", &bytes, MODEL_MAGIC), ("adapter", &abytes, ADAPTER_MAGIC)] {
        for i in 0..original.len() {
            for delta in [0x01u8, 0x80, 0xff] {
                let mut bad = original.clone();
                bad[i] ^= delta;
                ensure!(ftlab::checkpoint::decode(&bad, magic).is_err(), "{what}: flip {delta:#04x} at byte {i} went undetected");
                let typed_err = if magic == MODEL_MAGIC {
                    weights_from_bytes(&bad).is_err()
                } else {
                    adapters_from_bytes(&bad).is_err()
                };
                ensure!(typed_err, "{what}: typed loader accepted flip at byte {i}");
                flips += 1;
            }
        }
    }
    Ok(format!("bit-identical round trips; {flips} corruptions all rejected"))
}

fn determinism() -> Outcome {
    let chunks = fixture_chunks("overfit.txt", 64);
    let run = || {
        let mut w = seeded_model(desk_config(64, 16, 1), 7);
        let mut set = adapters_for(&w, 4, 8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-2,
            seed: 7,
            ..Default::default()
        };
        let h = train_lm(&mut w, &mut set, &chunks, &cfg).unwrap();
        let losses: Vec<u64> = h.epochs.iter().map(|e| e.loss.to_bits()).collect();
        (sha(&adapters_to_bytes(&set, &[])), losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    ensure!(a == b, "adapter hashes differ: {a} vs {b}");
    ensure!(la == lb, "loss histories differ");
    Ok(format!("adapter sha256 {}…; {} epoch losses identical", &a[..12], la.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 14] = [
        ("gradient suite", gradients),
        ("LoRA identity", lora_identity),
        ("merge equivalence", merge_equivalence),
        ("chunk construction", chunking),
        ("overfit smoke", overfit),
        ("perplexity oracle", perplexity_oracle),
        ("return bucketing", bucketing),
        ("headline classifier", classifier),
        ("ROUGE oracle", rouge),
        ("multiple choice", multiple_choice),
        ("preference aggregation", preferences),
        ("instruction JSONL", instructions),
        ("checkpoint round trip", checkpoints),
        ("end-to-end determinism", determinism),
    ];
    let filter: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if filter.is_some_and(|f| f != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
