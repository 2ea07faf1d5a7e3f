//! Implementations of the four subcommands.

use std::collections::HashSet;
use std::path::Path;

use ctxmem::config::RunConfig;
use ctxmem::evaluation::{
    ablation_sweep, bleu, coherence, consistency, disambiguation, model_word_embedder, parse_dict,
    rows_to_tsv, AblationInputs, AblationKind, AmbiguityDict, EvalError,
    EvaluationReport, ReportMetadata,
};
use ctxmem::inference::{translate_corpus, DecodeOptions, InferError};
use ctxmem::text::{
    encode_corpus, load_documents, load_parallel_text, ContextMode, BpeModel, Vocabulary,
};
use ctxmem::training::{Checkpoint, Trainer, TrainError, TranslationSystem, BPE_FILE, VOCAB_FILE};

use crate::{
    AblateArgs, EvaluateArgs, MetricFlag, ModeFlag, TrainArgs, TranslateArgs, EXIT_CONFIG,
    EXIT_DATA, EXIT_NUMERIC,
};

impl ModeFlag {
    fn to_mode(self) -> ContextMode {
        match self {
            ModeFlag::Previous => ContextMode::Previous,
            ModeFlag::Next => ContextMode::Next,
            ModeFlag::Random => ContextMode::Random,
        }
    }
}

fn fail(code: i32, message: impl std::fmt::Display) -> i32 {
    eprintln!("error: {message}");
    code
}

// ── train ───────────────────────────────────────────────────────────────

pub fn train(args: TrainArgs) -> i32 {
    let config = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let raw = match load_parallel_text(&args.source, &args.target) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let lines: Vec<String> = raw
        .iter()
        .flatten()
        .flat_map(|(s, t)| [s.clone(), t.clone()])
        .collect();
    let bpe = match BpeModel::train(&lines, config.bpe_merges) {
        Ok(b) => b,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let vocab = match Vocabulary::new(bpe.corpus_symbols(&lines)) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_DATA, e),
    };
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        return fail(EXIT_DATA, format!("{}: {e}", args.out));
    }
    let out = Path::new(&args.out);
    let path_str = |p: &Path| p.to_str().expect("utf-8 path").to_string();
    if let Err(e) = bpe.save(&path_str(&out.join(BPE_FILE))) {
        return fail(EXIT_DATA, e);
    }
    if let Err(e) = vocab.save(&path_str(&out.join(VOCAB_FILE))) {
        return fail(EXIT_DATA, e);
    }

    let corpus = encode_corpus(&raw, &bpe, &vocab);
    let mut trainer = match Trainer::new(config, vocab.len()) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let result = trainer.run(
        &corpus,
        |step, loss, lr| println!("{step}\t{loss:.6}\t{lr:.8}"),
        |t| {
            let ck = Checkpoint::from_trainer(t);
            let path = out.join(format!("checkpoint-{}.ckpt", t.optimizer.step));
            ck.save(path.to_str().expect("utf-8 path"))
                .map_err(TrainError::from)
        },
    );
    match result {
        Ok(()) => {
            let ck = Checkpoint::from_trainer(&trainer);
            let final_path = out.join("checkpoint-final.ckpt");
            match ck.save(final_path.to_str().expect("utf-8 path")) {
                Ok(()) => 0,
                Err(e) => fail(EXIT_DATA, e),
            }
        }
        Err(e @ TrainError::NonFiniteLoss { .. }) | Err(e @ TrainError::NonFiniteGrad { .. }) => {
            fail(EXIT_NUMERIC, e)
        }
        Err(TrainError::Checkpoint(e)) => fail(EXIT_DATA, e),
        Err(e) => fail(EXIT_NUMERIC, e),
    }
}

// ── translate ───────────────────────────────────────────────────────────

pub fn translate(args: TranslateArgs) -> i32 {
    let system = match TranslationSystem::load(&args.checkpoint) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let mut opts = DecodeOptions::from_system(&system);
    opts.beam = args.beam;
    opts.alpha = args.alpha;
    opts.max_len = args.max_len;
    if let Some(mode) = args.context_mode {
        opts.context_mode = mode.to_mode();
    }
    if let Some(m) = args.memory_size {
        opts.memory_size = m;
    }
    if let Some(g) = args.gate_override {
        if !(0.0..=1.0).contains(&g) {
            return fail(EXIT_CONFIG, "gate override must lie in [0, 1]");
        }
        opts.gate_override = Some(g);
    }
    if opts.beam < 1 {
        return fail(EXIT_CONFIG, "beam width must be at least 1");
    }
    if let Err(e) = opts.validate(&system.model) {
        return fail(EXIT_CONFIG, e);
    }
    let documents = match load_documents(&args.input) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let translated = match translate_corpus(&system, &documents, &opts, args.threads) {
        Ok(t) => t,
        Err(e @ InferError::Model(_)) => return fail(EXIT_NUMERIC, e),
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let body = render_documents(&translated);
    match args.output {
        Some(path) => match std::fs::write(&path, body) {
            Ok(()) => 0,
            Err(e) => fail(EXIT_DATA, format!("{path}: {e}")),
        },
        None => {
            print!("{body}");
            0
        }
    }
}

fn render_documents(documents: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (i, doc) in documents.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for sentence in doc {
            out.push_str(sentence);
            out.push('\n');
        }
    }
    out
}

// ── evaluate ────────────────────────────────────────────────────────────

fn load_stopwords(path: &str) -> Result<HashSet<String>, String> {
    let body = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    Ok(body.lines().map(|l| l.trim().to_string()).collect())
}

fn load_dict_file(path: &str) -> Result<AmbiguityDict, String> {
    let body = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    Ok(parse_dict(&body))
}

pub fn evaluate(args: EvaluateArgs) -> i32 {
    let wants = |m: MetricFlag| args.metric == m || args.metric == MetricFlag::All;

    // resource presence is a configuration matter; reading them is data
    if wants(MetricFlag::Consistency) && args.stopwords.is_none() {
        return fail(EXIT_CONFIG, "consistency needs --stopwords");
    }
    if wants(MetricFlag::Disambiguation) && (args.dict.is_none() || args.source.is_none()) {
        return fail(EXIT_CONFIG, "disambiguation needs --dict and --source");
    }
    if wants(MetricFlag::Coherence) && args.checkpoint.is_none() {
        return fail(EXIT_CONFIG, "coherence needs --checkpoint for its embeddings");
    }

    let output_docs = match load_documents(&args.outputs) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let reference_docs = match load_documents(&args.references) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let outputs: Vec<String> = output_docs.iter().flatten().cloned().collect();
    let references: Vec<String> = reference_docs.iter().flatten().cloned().collect();

    let mut report = EvaluationReport {
        metadata: ReportMetadata {
            window_mode: wants(MetricFlag::Consistency)
                .then(|| args.window.to_mode().name().to_string()),
            window_size: wants(MetricFlag::Consistency).then_some(args.m),
            stopwords_path: args.stopwords.clone(),
            dict_path: args.dict.clone(),
            checkpoint_path: args.checkpoint.clone(),
            source_path: args.source.clone(),
        },
        ..Default::default()
    };

    if wants(MetricFlag::Bleu) {
        match bleu(&outputs, &references) {
            Ok(score) => report.bleu = Some(score),
            Err(e) => return fail(EXIT_DATA, e),
        }
    }
    if wants(MetricFlag::Consistency) {
        let window = args.window.to_mode();
        if window == ContextMode::Random {
            return fail(EXIT_CONFIG, "consistency windows are previous or next");
        }
        let stopwords = match load_stopwords(args.stopwords.as_deref().expect("checked")) {
            Ok(s) => s,
            Err(e) => return fail(EXIT_DATA, e),
        };
        // the window is drawn from the scored text itself
        match consistency(&output_docs, window, args.m, &stopwords, "<unk>") {
            Ok(score) => report.consistency = Some(score),
            Err(e) => return fail(EXIT_DATA, e),
        }
    }
    if wants(MetricFlag::Disambiguation) {
        let dict = match load_dict_file(args.dict.as_deref().expect("checked")) {
            Ok(d) => d,
            Err(e) => return fail(EXIT_DATA, e),
        };
        let source_docs = match load_documents(args.source.as_deref().expect("checked")) {
            Ok(d) => d,
            Err(e) => return fail(EXIT_DATA, e),
        };
        let sources: Vec<String> = source_docs.iter().flatten().cloned().collect();
        match disambiguation(&outputs, &sources, &dict) {
            Ok(score) => report.disambiguation_std = Some(score),
            Err(e) => return fail(EXIT_DATA, e),
        }
    }
    if wants(MetricFlag::Coherence) {
        let system = match TranslationSystem::load(args.checkpoint.as_deref().expect("checked")) {
            Ok(s) => s,
            Err(e) => return fail(EXIT_DATA, e),
        };
        match coherence(&output_docs, model_word_embedder(&system)) {
            Ok(score) => report.coherence = Some(score),
            Err(e) => return fail(EXIT_DATA, e),
        }
    }

    println!("{}", report.to_json());
    0
}

// ── ablate ──────────────────────────────────────────────────────────────

/// Grid forms: `a,b,c`, an inclusive integer range `a..b`, or an inclusive
/// float range `a:b:step`.
fn parse_grid(spec: &str) -> Result<Vec<String>, String> {
    if let Some((a, rest)) = spec.split_once(':') {
        let (b, step) = rest
            .split_once(':')
            .ok_or_else(|| format!("bad float range {spec:?}, expected a:b:step"))?;
        let a: f64 = a.parse().map_err(|_| format!("bad range start {a:?}"))?;
        let b: f64 = b.parse().map_err(|_| format!("bad range end {b:?}"))?;
        let step: f64 = step.parse().map_err(|_| format!("bad range step {step:?}"))?;
        if step <= 0.0 || b < a {
            return Err(format!("bad float range {spec:?}"));
        }
        let mut out = Vec::new();
        let mut i = 0usize;
        loop {
            let v = a + step * i as f64;
            if v > b + step * 1e-9 {
                break;
            }
            out.push(format_setting(v));
            i += 1;
        }
        return Ok(out);
    }
    if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.parse().map_err(|_| format!("bad range start {a:?}"))?;
        let b: usize = b.parse().map_err(|_| format!("bad range end {b:?}"))?;
        if b < a {
            return Err(format!("bad integer range {spec:?}"));
        }
        return Ok((a..=b).map(|v| v.to_string()).collect());
    }
    Ok(spec.split(',').map(|s| s.trim().to_string()).collect())
}

fn format_setting(v: f64) -> String {
    let rounded = (v * 1e9).round() / 1e9;
    let mut s = format!("{rounded}");
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

pub fn ablate(args: AblateArgs) -> i32 {
    let Some(kind) = AblationKind::parse(&args.kind) else {
        return fail(EXIT_CONFIG, format!("unknown ablation kind {:?}", args.kind));
    };
    let grid = match parse_grid(&args.grid) {
        Ok(g) => g,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if grid.is_empty() {
        return fail(EXIT_CONFIG, "empty grid");
    }
    let checkpoint_paths: Vec<&str> = args
        .checkpoints
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let mut systems = Vec::with_capacity(checkpoint_paths.len());
    for path in &checkpoint_paths {
        match TranslationSystem::load(path) {
            Ok(s) => systems.push(s),
            Err(e) => return fail(EXIT_DATA, e),
        }
    }
    let source_documents = match load_documents(&args.source) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let reference_documents = match load_documents(&args.references) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let stopwords = match &args.stopwords {
        Some(path) => match load_stopwords(path) {
            Ok(s) => Some(s),
            Err(e) => return fail(EXIT_DATA, e),
        },
        None => None,
    };
    let dict = match &args.dict {
        Some(path) => match load_dict_file(path) {
            Ok(d) => Some(d),
            Err(e) => return fail(EXIT_DATA, e),
        },
        None => None,
    };
    let metric_window = args.window.to_mode();
    if metric_window == ContextMode::Random {
        return fail(EXIT_CONFIG, "metric windows are previous or next");
    }

    let base = DecodeOptions {
        beam: args.beam,
        alpha: args.alpha,
        max_len: args.max_len,
        memory_size: systems[0].config.memory_size,
        context_mode: systems[0].config.context_mode,
        gate_override: None,
    };
    let inputs = AblationInputs {
        source_documents: &source_documents,
        reference_documents: &reference_documents,
        stopwords: stopwords.as_ref(),
        dict: dict.as_ref(),
        metric_window,
        metric_m: args.window_m,
        threads: args.threads,
    };
    match ablation_sweep(kind, &grid, &systems, &base, &inputs) {
        Ok(rows) => {
            print!("{}", rows_to_tsv(kind, &rows));
            0
        }
        Err(e @ EvalError::EmptyInput) | Err(e @ EvalError::CountMismatch { .. }) => {
            fail(EXIT_DATA, e)
        }
        Err(EvalError::Infer(e @ InferError::Model(_))) => fail(EXIT_NUMERIC, e),
        Err(e) => fail(EXIT_CONFIG, e),
    }
}
