//! One function per subcommand.

use std::path::{Path, PathBuf};

use layoutmask::docmodel::{generate_document, read_corpus, write_corpus, DocumentRecord, GeneratorStyle, ENTITY_TAGS};
use layoutmask::harness::{encode_corpus, evaluate as score_model, finetune as run_finetune, gradcheck as run_gradcheck, item_rng, pretrain as run_pretrain};
use layoutmask::heads::gold;
use layoutmask::masking::build_plan;
use layoutmask::metrics::{evaluate_dump, read_predictions, write_predictions};
use layoutmask::model::{load_checkpoint, Checkpoint};
use layoutmask::{Error, EvalReport, Model, Result, RunConfig, Vocabulary};

use crate::settings::{preset, resolve, task_from_file, Resolved};
use crate::{EvalArgs, FinetuneArgs, GenArgs, GradcheckArgs, InspectArgs, TrainArgs};

const VOCAB_FILE: &str = "vocab.json";
const RUN_FILE: &str = "run.json";

fn tags() -> Vec<String> {
    ENTITY_TAGS.iter().map(|s| s.to_string()).collect()
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing {what}")))
}

fn load_docs(path: &Path) -> Result<Vec<DocumentRecord>> {
    read_corpus(path)?.collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// The vocabulary beside a checkpoint, if there is one.
fn sibling_vocab(ckpt: &Path) -> Option<PathBuf> {
    let p = ckpt.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE);
    p.exists().then_some(p)
}

/// Explicit vocabulary, else the one saved with the initial checkpoint,
/// else one built from the corpus and sized to the model.
fn vocabulary(explicit: Option<&Path>, init: Option<&Path>, docs: &[DocumentRecord], size: usize) -> Result<Vocabulary> {
    if let Some(p) = explicit.map(Path::to_path_buf).or_else(|| init.and_then(sibling_vocab)) {
        let v = Vocabulary::load(&p)?;
        if v.len() > size {
            return Err(Error::Config(format!("{} has {} tokens, model text vocabulary is {size}", p.display(), v.len())));
        }
        return Ok(v);
    }
    Ok(Vocabulary::build(docs.iter().flat_map(|d| d.words.iter().map(String::as_str)), size))
}

fn require_seed(r: &Resolved) -> Result<()> {
    require(r.seed, "--seed (or `seed` in the config file); training runs are never seeded implicitly").map(|_| ())
}

pub fn gen_corpus(a: &GenArgs) -> Result<()> {
    if a.classes == 0 {
        return Err(Error::Config("--classes must be positive".into()));
    }
    let docs: Vec<DocumentRecord> = (0..a.count)
        .map(|i| {
            let style = GeneratorStyle {
                num_doc_classes: a.classes,
                doc_class: a.balanced.then_some((i % u64::from(a.classes)) as u32),
                ..GeneratorStyle::default()
            };
            generate_document(a.seed.wrapping_add(i), &style)
        })
        .collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_corpus(&docs, &a.out)?;
    println!("wrote {} documents to {}", docs.len(), a.out.display());
    Ok(())
}

/// Builds the model for a training run: from `init` when given, otherwise
/// fresh from the run's config and seed. A task head in `run.task` that the
/// checkpoint lacks starts from its own initialization.
fn initial_model(run: &RunConfig, init: Option<&Path>) -> Result<Model> {
    match init {
        None => Model::new(run.model.clone(), run.task.clone(), run.seed),
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let task = run.task.clone().or(ckpt.task.clone());
            let mut model = Model::new(ckpt.config.clone(), task, run.seed)?;
            model.load_matching(&ckpt)?;
            Ok(model)
        }
    }
}

fn prepare(r: &mut Resolved) -> Result<(Model, Vec<DocumentRecord>, Vocabulary, PathBuf)> {
    require_seed(r)?;
    let out_dir = require(r.run.out_dir.clone(), "--out-dir")?;
    let corpus = require(r.corpus.clone(), "--corpus")?;
    r.run.validate()?;
    let model = initial_model(&r.run, r.init.as_deref())?;
    r.run.model = model.config.clone();
    let docs = load_docs(&corpus)?;
    let vocab = vocabulary(r.vocab.as_deref(), r.init.as_deref(), &docs, model.config.text_vocab)?;
    create_dir(&out_dir)?;
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    write_json(&r.run, &out_dir.join(RUN_FILE))?;
    Ok((model, docs, vocab, out_dir))
}

pub fn pretrain(a: &TrainArgs) -> Result<()> {
    let mut r = resolve(a, None)?;
    let (mut model, docs, vocab, out_dir) = prepare(&mut r)?;
    let data = encode_corpus(&docs, &model.config, &vocab)?;
    let every = (r.run.total_steps / 20).max(1);
    let report = run_pretrain(&r.run, &mut model, &data, |step, loss| {
        if step % every == 0 || step == 1 {
            eprintln!("{}", loss.log_line(step));
        }
    })?;
    if let Some(last) = report.log.last() {
        println!("final\t{}", last.log_line(report.log.len()));
    }
    println!("checkpoints in {}", out_dir.display());
    Ok(())
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let kind = require(a.task.or(task_from_file(&a.train)?), "--task")?;
    let mut r = resolve(&a.train, Some((kind, a.classes)))?;
    let (mut model, docs, vocab, out_dir) = prepare(&mut r)?;
    let data = encode_corpus(&docs, &model.config, &vocab)?;
    let every = (r.run.total_steps / 20).max(1);
    let losses = run_finetune(&r.run, &mut model, &docs, &data, |step, loss| {
        if step % every == 0 || step == 1 {
            eprintln!("{step}\t{loss}");
        }
    })?;
    if let Some(l) = losses.last() {
        println!("final task loss\t{l}");
    }
    if let Some(eval) = &r.eval_corpus {
        let eval_docs = load_docs(eval)?;
        let eval_data = encode_corpus(&eval_docs, &model.config, &vocab)?;
        let (preds, report) = score_model(&model, &eval_docs, &eval_data, &tags())?;
        write_predictions(&preds, &out_dir.join("predictions.jsonl"))?;
        emit(&report, Some(&out_dir.join("report.tsv")))?;
    }
    Ok(())
}

fn emit(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    println!("{report}");
    if let Some(p) = path {
        std::fs::write(p, format!("{report}\n")).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn evaluate(a: &EvalArgs) -> Result<()> {
    let report = match (&a.checkpoint, &a.gold) {
        (Some(ckpt_path), None) => {
            let corpus = require(a.corpus.as_ref(), "--corpus")?;
            let ckpt: Checkpoint = load_checkpoint(ckpt_path)?;
            let model = ckpt.into_model()?;
            if let (Some(want), Some(head)) = (a.task, &model.task) {
                if head.config.kind != want {
                    return Err(Error::Config(format!("checkpoint head is {:?}, not {want:?}", head.config.kind)));
                }
            }
            let docs = load_docs(corpus)?;
            let vocab_path = require(a.vocab.clone().or_else(|| sibling_vocab(ckpt_path)), "--vocab")?;
            let vocab = Vocabulary::load(&vocab_path)?;
            let data = encode_corpus(&docs, &model.config, &vocab)?;
            let (preds, report) = score_model(&model, &docs, &data, &tags())?;
            if let Some(p) = &a.predictions {
                write_predictions(&preds, p)?;
            }
            report
        }
        (None, Some(gold_path)) => {
            let kind = require(a.task, "--task")?;
            let preds = read_predictions(require(a.predictions.as_ref(), "--predictions")?)?;
            let golds = match gold_path.extension().and_then(|e| e.to_str()) {
                Some("jsonl") if read_predictions(gold_path).is_ok() && !is_corpus(gold_path) => read_predictions(gold_path)?,
                _ => load_docs(gold_path)?.iter().map(|d| gold(d, kind, &tags())).collect::<Result<Vec<_>>>()?,
            };
            evaluate_dump(kind, &preds, &golds)?
        }
        _ => return Err(Error::Config("give either --checkpoint with --corpus, or --predictions with --gold".into())),
    };
    emit(&report, a.report.as_deref())
}

/// A corpus line carries words; a prediction dump never does.
fn is_corpus(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| t.lines().find(|l| !l.trim().is_empty()).map(|l| l.contains("\"words\"")))
        .unwrap_or(false)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(&preset(&a.preset)?, a.seed)?;
    println!("{report}");
    let worst = report.max_rel_err();
    if !(worst <= a.tolerance) {
        return Err(Error::Numeric(format!("largest relative error {worst:e} exceeds {:e}", a.tolerance)));
    }
    Ok(())
}

pub fn inspect_plan(a: &InspectArgs) -> Result<()> {
    let r = resolve(&a.train, None)?;
    let seed = require(r.seed, "--seed")?;
    let corpus = require(r.corpus.clone(), "--corpus")?;
    r.run.model.validate()?;
    let docs = load_docs(&corpus)?;
    let doc = docs
        .get(a.index)
        .ok_or(Error::Lookup { id: a.index, size: docs.len() })?;
    let vocab = vocabulary(r.vocab.as_deref(), r.init.as_deref(), &docs, r.run.model.text_vocab)?;
    let data = encode_corpus(std::slice::from_ref(doc), &r.run.model, &vocab)?;
    let plan = build_plan(&data[0], &r.run.masking, r.run.model.text_vocab, r.run.model.image_vocab, &mut item_rng(seed, 1, 0))?;
    let body = serde_json::to_string_pretty(&plan).map_err(|e| Error::Format(e.to_string()))?;
    println!("{body}");
    Ok(())
}
