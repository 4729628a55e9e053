//! Dataset schemas, ingestion and the text templates fed to both components.
//!
//! Three dataset families are supported: CME-style multiple-choice JSONL,
//! e-SNLI CSV and CoS-E JSONL. Every sample is rendered into per-option
//! classifier inputs and a single generator source/target pair; the exact
//! byte layout of those strings is documented in `docs/FORMATS.md`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const OPTIONS_MARKER: &str = "The options are";
pub const CONTEXT_MARKER: &str = "reference:";
pub const ANSWER_PREFIX: &str = "The answer is";
pub const EXPLANATION_PREFIX: &str = "My commonsense tells me that";
pub const EXPLANATION_TAG: &str = "explanation";
pub const NLI_TAG: &str = "nli";

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaSample {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    /// One passage per option.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl McqaSample {
    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    pub fn gold_option(&self) -> &str {
        &self.options[self.answer_index]
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.is_empty() {
            return Err(Error::Schema(format!("{}: no options", self.id)));
        }
        if self.answer_index >= self.options.len() {
            return Err(Error::Schema(format!(
                "{}: answer_index {} out of range for {} options",
                self.id,
                self.answer_index,
                self.options.len()
            )));
        }
        if let Some(evidence) = &self.evidence {
            if evidence.len() != self.options.len() {
                return Err(Error::Schema(format!(
                    "{}: {} evidence passages for {} options",
                    self.id,
                    evidence.len(),
                    self.options.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(Error::Schema(format!("unknown NLI label {other:?}"))),
        }
    }
}

/// One premise/hypothesis pair with its annotated explanations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliSample {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
    #[serde(default)]
    pub explanations: Vec<String>,
}

impl NliSample {
    /// BLEU references: the first two annotated explanations.
    pub fn references(&self) -> &[String] {
        &self.explanations[..self.explanations.len().min(2)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sample {
    Mcqa(McqaSample),
    Nli(NliSample),
}

impl Sample {
    pub fn id(&self) -> &str {
        match self {
            Sample::Mcqa(s) => &s.id,
            Sample::Nli(s) => &s.id,
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Sample::Mcqa(_) => TaskKind::Mcqa,
            Sample::Nli(_) => TaskKind::Nli,
        }
    }

    pub fn label(&self) -> usize {
        match self {
            Sample::Mcqa(s) => s.answer_index,
            Sample::Nli(s) => s.label.index(),
        }
    }

    /// Number of label classes: options for MCQA, three for NLI.
    pub fn num_labels(&self) -> usize {
        match self {
            Sample::Mcqa(s) => s.options.len(),
            Sample::Nli(_) => NliLabel::ALL.len(),
        }
    }

    /// The explanation used as generation target, if any.
    pub fn explanation(&self) -> Option<&str> {
        match self {
            Sample::Mcqa(s) => s.explanation.as_deref(),
            Sample::Nli(s) => s.explanations.first().map(String::as_str),
        }
    }

    /// Text rendered in "The answer is ..." targets.
    pub fn gold_text(&self) -> &str {
        match self {
            Sample::Mcqa(s) => s.gold_option(),
            Sample::Nli(s) => s.label.as_str(),
        }
    }

    /// Reference explanations for BLEU.
    pub fn references(&self) -> Vec<String> {
        match self {
            Sample::Mcqa(s) => s.explanation.iter().cloned().collect(),
            Sample::Nli(s) => s.references().to_vec(),
        }
    }
}

impl From<McqaSample> for Sample {
    fn from(s: McqaSample) -> Self {
        Sample::Mcqa(s)
    }
}

impl From<NliSample> for Sample {
    fn from(s: NliSample) -> Self {
        Sample::Nli(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mcqa,
    Nli,
}

/// Segmentation symbols. They belong to the underlying pre-trained model, so
/// they can be overridden; the defaults are the literal bracketed strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbols {
    pub cls: String,
    pub sep: String,
    pub eos: String,
}

impl Default for Symbols {
    fn default() -> Self {
        Self {
            cls: "[CLS]".into(),
            sep: "[SEP]".into(),
            eos: "[EOS]".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    QaOnly,
    QaEvidence,
    QaExplanation,
    ProbeTest,
}

impl FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa_only" => Ok(Self::QaOnly),
            "qa_evidence" => Ok(Self::QaEvidence),
            "qa_explanation" => Ok(Self::QaExplanation),
            "probe_test" => Ok(Self::ProbeTest),
            other => Err(Error::Param(format!("unknown classifier mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierInstance {
    pub option_index: usize,
    pub input_text: String,
    /// 1 for the gold option and 0 otherwise (MCQA); the class index (NLI).
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Explained,
    Unexplained,
}

/// Whether every training sample carries an explanation (homogeneous) or
/// only some of them do (mixed). The generator templates differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorFormat {
    Homogeneous,
    Mixed,
}

impl GeneratorFormat {
    pub fn detect<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        if samples.into_iter().all(|s| s.explanation().is_some()) {
            GeneratorFormat::Homogeneous
        } else {
            GeneratorFormat::Mixed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorInstance {
    pub source_text: String,
    pub target_text: String,
    pub has_explanation: bool,
}

fn join(parts: &[&str]) -> String {
    parts.join(" ")
}

/// Renders the classifier inputs of one sample: `K` instances for MCQA, one
/// for NLI.
pub fn build_classifier_inputs(
    sample: &Sample,
    mode: ClassifierMode,
    symbols: &Symbols,
) -> Result<Vec<ClassifierInstance>> {
    let (cls, sep, eos) = (symbols.cls.as_str(), symbols.sep.as_str(), symbols.eos.as_str());
    match sample {
        Sample::Nli(s) => {
            if mode != ClassifierMode::QaOnly {
                return Err(Error::Format(format!(
                    "{}: NLI classifier inputs only support qa_only, got {mode:?}",
                    s.id
                )));
            }
            Ok(vec![ClassifierInstance {
                option_index: 0,
                input_text: join(&[cls, &s.premise, sep, &s.hypothesis, eos]),
                label: s.label.index(),
            }])
        }
        Sample::Mcqa(s) => {
            s.validate()?;
            let evidence = match mode {
                ClassifierMode::QaEvidence => match &s.evidence {
                    Some(e) if e.len() == s.options.len() => Some(e),
                    _ => {
                        return Err(Error::Format(format!(
                            "{}: qa_evidence needs one evidence passage per option",
                            s.id
                        )))
                    }
                },
                _ => None,
            };
            let explanation = match mode {
                ClassifierMode::QaExplanation | ClassifierMode::ProbeTest => {
                    Some(s.explanation.as_deref().ok_or_else(|| {
                        Error::Format(format!("{}: {mode:?} needs an explanation", s.id))
                    })?)
                }
                _ => None,
            };
            let instances = s
                .options
                .iter()
                .enumerate()
                .map(|(j, option)| {
                    let input_text = match mode {
                        ClassifierMode::QaOnly => join(&[cls, &s.question, sep, option, eos]),
                        ClassifierMode::QaEvidence => {
                            let ev = &evidence.expect("checked above")[j];
                            join(&[cls, &s.question, option, sep, ev, eos])
                        }
                        ClassifierMode::QaExplanation => join(&[
                            cls,
                            &s.question,
                            option,
                            sep,
                            explanation.expect("checked above"),
                            eos,
                        ]),
                        ClassifierMode::ProbeTest => {
                            join(&[cls, option, sep, explanation.expect("checked above"), eos])
                        }
                    };
                    ClassifierInstance {
                        option_index: j,
                        input_text,
                        label: usize::from(j == s.answer_index),
                    }
                })
                .collect();
            Ok(instances)
        }
    }
}

/// Generator source before any supervision-dependent prefix.
pub fn generator_source(sample: &Sample) -> String {
    match sample {
        Sample::Mcqa(s) => {
            let mut out = format!("{} {}", s.question, OPTIONS_MARKER);
            for option in &s.options {
                out.push(' ');
                out.push_str(option);
            }
            if let Some(context) = &s.question_context {
                out.push(' ');
                out.push_str(CONTEXT_MARKER);
                out.push(' ');
                out.push_str(context);
            }
            out
        }
        Sample::Nli(s) => join(&[NLI_TAG, &s.premise, &s.hypothesis]),
    }
}

/// Renders the generator source/target pair.
pub fn build_generator_instance(
    sample: &Sample,
    supervision: Supervision,
    format: GeneratorFormat,
) -> Result<GeneratorInstance> {
    let source = generator_source(sample);
    let answer = format!("{ANSWER_PREFIX} {}", sample.gold_text());
    match supervision {
        Supervision::Unexplained => Ok(GeneratorInstance {
            source_text: source,
            target_text: answer,
            has_explanation: false,
        }),
        Supervision::Explained => {
            let explanation = sample.explanation().ok_or_else(|| {
                Error::Format(format!(
                    "{}: explained supervision without an explanation",
                    sample.id()
                ))
            })?;
            let (source_text, target_text) = match format {
                GeneratorFormat::Homogeneous => {
                    (source, format!("{EXPLANATION_PREFIX} {explanation}"))
                }
                GeneratorFormat::Mixed => (
                    format!("{EXPLANATION_TAG} {source}"),
                    format!("{answer}. {EXPLANATION_PREFIX} {explanation}"),
                ),
            };
            Ok(GeneratorInstance {
                source_text,
                target_text,
                has_explanation: true,
            })
        }
    }
}

/// Source text used at inference time. Mixed-format models are asked for
/// an explanation with the same prefix they were trained on.
pub fn inference_source(sample: &Sample, format: GeneratorFormat) -> String {
    let source = generator_source(sample);
    match format {
        GeneratorFormat::Homogeneous => source,
        GeneratorFormat::Mixed => format!("{EXPLANATION_TAG} {source}"),
    }
}

/// Picks the supervision branch from the sample itself.
pub fn supervision_of(sample: &Sample) -> Supervision {
    if sample.explanation().is_some() {
        Supervision::Explained
    } else {
        Supervision::Unexplained
    }
}

/// Removes the explanation template prefix from a generated text, if present.
pub fn strip_explanation_prefix(text: &str) -> &str {
    let trimmed = text.trim();
    if let Some(idx) = trimmed.find(EXPLANATION_PREFIX) {
        trimmed[idx + EXPLANATION_PREFIX.len()..].trim_start()
    } else {
        trimmed
    }
}

/// Collapses runs of whitespace into single spaces.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lexical stand-in for question-context retrieval: passages are ranked by
/// the fraction of their distinct tokens that also occur in the question.
pub fn retrieve_question_context(question: &str, corpus: &[String], top_k: usize) -> Result<String> {
    if corpus.is_empty() {
        return Err(Error::Retrieval("empty passage corpus".into()));
    }
    if top_k == 0 {
        return Err(Error::Retrieval("top_k must be at least 1".into()));
    }
    let query: HashSet<&str> = question.split_whitespace().collect();
    let mut scored: Vec<(f64, usize)> = corpus
        .iter()
        .enumerate()
        .map(|(i, passage)| {
            let tokens: HashSet<&str> = passage.split_whitespace().collect();
            let score = if tokens.is_empty() {
                0.0
            } else {
                tokens.intersection(&query).count() as f64 / tokens.len() as f64
            };
            (score, i)
        })
        .collect();
    // stable sort keeps corpus order among equal scores
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored
        .iter()
        .take(top_k)
        .map(|&(_, i)| corpus[i].as_str())
        .collect::<Vec<_>>()
        .join(" "))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Loads a CME-style JSONL file. Blank lines are skipped.
pub fn load_cme_jsonl(path: impl AsRef<Path>) -> Result<Vec<McqaSample>> {
    let path = path.as_ref();
    let mut samples = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: McqaSample = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        sample.validate()?;
        samples.push(sample);
    }
    check_constant_k(&samples)?;
    Ok(samples)
}

fn check_constant_k(samples: &[McqaSample]) -> Result<()> {
    if let Some(first) = samples.first() {
        let k = first.options.len();
        if let Some(bad) = samples.iter().find(|s| s.options.len() != k) {
            return Err(Error::Schema(format!(
                "{}: {} options, expected {k} like the rest of the file",
                bad.id,
                bad.options.len()
            )));
        }
    }
    Ok(())
}

/// Loads a prepared JSONL file of either task.
pub fn load_samples(path: impl AsRef<Path>, task: TaskKind) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    match task {
        TaskKind::Mcqa => Ok(load_cme_jsonl(path)?.into_iter().map(Sample::Mcqa).collect()),
        TaskKind::Nli => {
            let mut out = Vec::new();
            for (i, line) in open(path)?.lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: NliSample = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                out.push(Sample::Nli(s));
            }
            Ok(out)
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// e-SNLI splits after ingestion.
#[derive(Debug, Clone)]
pub struct EsnliSplits {
    pub train: Vec<NliSample>,
    pub dev: Vec<NliSample>,
    pub test: Vec<NliSample>,
    /// Training rows before the containment filter.
    pub train_raw: usize,
}

/// Reads one e-SNLI CSV file (header row with `gold_label`, `Sentence1`,
/// `Sentence2` and `Explanation_1..3` columns).
pub fn load_esnli_csv(path: impl AsRef<Path>) -> Result<Vec<NliSample>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(open(path)?);
    let headers = reader
        .headers()
        .map_err(|e| ingest_csv(path, 1, e))?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingest {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let id_col = column("pairID")?;
    let label_col = column("gold_label")?;
    let premise_col = column("Sentence1")?;
    let hypothesis_col = column("Sentence2")?;
    let expl_cols: Vec<usize> = std::iter::once(column("Explanation_1")?)
        .chain(
            ["Explanation_2", "Explanation_3"]
                .iter()
                .filter_map(|n| headers.iter().position(|h| h == *n)),
        )
        .collect();

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| ingest_csv(path, line, e))?;
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let label: NliLabel = field(label_col)
            .parse()
            .map_err(|e: Error| Error::Schema(format!("{}:{line}: {e}", path.display())))?;
        let explanations = expl_cols
            .iter()
            .map(|&c| field(c))
            .filter(|e| !e.trim().is_empty())
            .take(3)
            .collect();
        out.push(NliSample {
            id: field(id_col),
            premise: field(premise_col),
            hypothesis: field(hypothesis_col),
            label,
            explanations,
        });
    }
    Ok(out)
}

fn ingest_csv(path: &Path, line: usize, e: csv::Error) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(line),
        message: e.to_string(),
    }
}

/// True when an explanation restates the whole premise or hypothesis.
pub fn esnli_copies_input(sample: &NliSample) -> bool {
    let premise = normalize_whitespace(&sample.premise);
    let hypothesis = normalize_whitespace(&sample.hypothesis);
    sample.explanations.iter().any(|e| {
        let e = normalize_whitespace(e);
        (!premise.is_empty() && e.contains(&premise))
            || (!hypothesis.is_empty() && e.contains(&hypothesis))
    })
}

/// Drops training samples whose explanation contains the full premise or
/// hypothesis verbatim.
pub fn esnli_filter_train(samples: Vec<NliSample>) -> Vec<NliSample> {
    samples.into_iter().filter(|s| !esnli_copies_input(s)).collect()
}

/// Loads the e-SNLI splits. The official training set ships in two files, so
/// `train_paths` accepts several.
pub fn load_esnli<P: AsRef<Path>>(
    train_paths: &[P],
    dev_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
) -> Result<EsnliSplits> {
    let mut train = Vec::new();
    for p in train_paths {
        train.extend(load_esnli_csv(p)?);
    }
    let train_raw = train.len();
    Ok(EsnliSplits {
        train: esnli_filter_train(train),
        dev: load_esnli_csv(dev_path)?,
        test: load_esnli_csv(test_path)?,
        train_raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoseVersion {
    #[serde(rename = "v1.0")]
    V1_0,
    #[serde(rename = "v1.11")]
    V1_11,
}

impl CoseVersion {
    pub fn num_options(self) -> usize {
        match self {
            CoseVersion::V1_0 => 3,
            CoseVersion::V1_11 => 5,
        }
    }
}

impl FromStr for CoseVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches('v') {
            "1.0" => Ok(CoseVersion::V1_0),
            "1.11" => Ok(CoseVersion::V1_11),
            other => Err(Error::Param(format!("unknown CoS-E version {other:?}"))),
        }
    }
}

fn cose_record(value: &Value) -> std::result::Result<McqaSample, String> {
    let str_field = |v: &Value, key: &str| v.get(key).and_then(Value::as_str).map(str::to_string);
    let id = match value.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing id".into()),
    };
    // Two layouts are accepted: the flattened one (question, choices,
    // answer, abstractive_explanation) and the CommonsenseQA-joined one
    // (question.stem, question.choices[].text, answerKey,
    // explanation.open-ended).
    let (question, options, answer_index) = match value.get("question") {
        Some(Value::String(q)) => {
            let options: Vec<String> = value
                .get("choices")
                .and_then(Value::as_array)
                .ok_or("missing choices")?
                .iter()
                .map(|c| c.as_str().map(str::to_string).ok_or("non-string choice"))
                .collect::<std::result::Result<_, _>>()?;
            let answer = str_field(value, "answer").ok_or("missing answer")?;
            let idx = options
                .iter()
                .position(|o| *o == answer)
                .ok_or_else(|| format!("answer {answer:?} is not among the choices"))?;
            (q.clone(), options, idx)
        }
        Some(q @ Value::Object(_)) => {
            let stem = str_field(q, "stem").ok_or("missing question.stem")?;
            let choices = q
                .get("choices")
                .and_then(Value::as_array)
                .ok_or("missing question.choices")?;
            let mut labels = Vec::new();
            let mut options = Vec::new();
            for c in choices {
                labels.push(str_field(c, "label").unwrap_or_default());
                options.push(str_field(c, "text").ok_or("choice without text")?);
            }
            let key = str_field(value, "answerKey").ok_or("missing answerKey")?;
            let idx = labels
                .iter()
                .position(|l| *l == key)
                .ok_or_else(|| format!("answerKey {key:?} not among choice labels"))?;
            (stem, options, idx)
        }
        _ => return Err("missing question".into()),
    };
    let explanation = match value.get("explanation") {
        Some(Value::String(s)) => Some(s.clone()),
        Some(e @ Value::Object(_)) => str_field(e, "open-ended"),
        _ => str_field(value, "abstractive_explanation"),
    };
    Ok(McqaSample {
        id,
        question,
        options,
        answer_index,
        evidence: None,
        question_context: None,
        explanation,
    })
}

/// Loads a CoS-E JSONL file and checks the option count against `version`.
pub fn load_cose(path: impl AsRef<Path>, version: CoseVersion) -> Result<Vec<McqaSample>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ingest = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| ingest(e.to_string()))?;
        let sample = cose_record(&value).map_err(ingest)?;
        if sample.options.len() != version.num_options() {
            return Err(Error::Schema(format!(
                "{}:{}: {} options but CoS-E {:?} has {}",
                path.display(),
                i + 1,
                sample.options.len(),
                version,
                version.num_options()
            )));
        }
        out.push(sample);
    }
    Ok(out)
}

/// Summary statistics of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub count: usize,
    pub options_per_question: Option<usize>,
    pub avg_question_tokens: f64,
    pub avg_option_tokens: f64,
    pub avg_explanation_tokens: f64,
    pub with_explanation: usize,
}

impl SplitStats {
    pub fn compute(split: &str, samples: &[Sample]) -> Self {
        let tokens = |s: &str| s.split_whitespace().count() as f64;
        let mean = |xs: Vec<f64>| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let mut q = Vec::new();
        let mut o = Vec::new();
        let mut e = Vec::new();
        let mut k = None;
        for s in samples {
            match s {
                Sample::Mcqa(m) => {
                    q.push(tokens(&m.question));
                    o.extend(m.options.iter().map(|x| tokens(x)));
                    k = Some(m.options.len());
                }
                Sample::Nli(n) => {
                    q.push(tokens(&n.premise) + tokens(&n.hypothesis));
                }
            }
            if let Some(x) = s.explanation() {
                e.push(tokens(x));
            }
        }
        SplitStats {
            split: split.to_string(),
            count: samples.len(),
            options_per_question: k,
            avg_question_tokens: mean(q),
            avg_option_tokens: mean(o),
            with_explanation: e.len(),
            avg_explanation_tokens: mean(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mcqa() -> McqaSample {
        McqaSample {
            id: "s1".into(),
            question: "Q".into(),
            options: vec!["A".into(), "B".into()],
            answer_index: 1,
            evidence: Some(vec!["ea".into(), "eb".into()]),
            question_context: None,
            explanation: None,
        }
    }

    fn texts(v: Vec<ClassifierInstance>) -> Vec<String> {
        v.into_iter().map(|i| i.input_text).collect()
    }

    #[test]
    fn evidence_mode_renders_per_option() {
        let got = build_classifier_inputs(&mcqa().into(), ClassifierMode::QaEvidence, &Symbols::default())
            .unwrap();
        assert_eq!(texts(got), ["[CLS] Q A [SEP] ea [EOS]", "[CLS] Q B [SEP] eb [EOS]"]);
    }

    #[test]
    fn probe_mode_attaches_explanation_to_every_option() {
        let mut s = mcqa();
        s.explanation = Some("ex".into());
        let got = build_classifier_inputs(&s.into(), ClassifierMode::ProbeTest, &Symbols::default())
            .unwrap();
        assert_eq!(texts(got), ["[CLS] A [SEP] ex [EOS]", "[CLS] B [SEP] ex [EOS]"]);
    }

    #[test]
    fn missing_evidence_is_a_format_error() {
        let mut s = mcqa();
        s.evidence = Some(vec![]);
        let err = build_classifier_inputs(&Sample::Mcqa(s.clone()), ClassifierMode::QaEvidence, &Symbols::default());
        assert!(matches!(err, Err(Error::Schema(_))));
        s.evidence = None;
        let err = build_classifier_inputs(&Sample::Mcqa(s), ClassifierMode::QaEvidence, &Symbols::default());
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn labels_mark_gold_option() {
        let got = build_classifier_inputs(&mcqa().into(), ClassifierMode::QaOnly, &Symbols::default())
            .unwrap();
        assert_eq!(got.iter().map(|i| i.label).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn generator_targets() {
        let mut s = mcqa();
        s.explanation = Some("E".into());
        let g = build_generator_instance(&s.clone().into(), Supervision::Explained, GeneratorFormat::Homogeneous)
            .unwrap();
        assert_eq!(g.target_text, "My commonsense tells me that E");
        assert_eq!(g.source_text, "Q The options are A B");

        let g = build_generator_instance(&s.clone().into(), Supervision::Unexplained, GeneratorFormat::Mixed)
            .unwrap();
        assert_eq!(g.target_text, "The answer is B");
        assert_eq!(g.source_text, "Q The options are A B");
        assert!(!g.has_explanation);

        let g = build_generator_instance(&s.into(), Supervision::Explained, GeneratorFormat::Mixed).unwrap();
        assert_eq!(g.source_text, "explanation Q The options are A B");
        assert_eq!(g.target_text, "The answer is B. My commonsense tells me that E");
    }

    #[test]
    fn explained_without_text_fails() {
        let r = build_generator_instance(&mcqa().into(), Supervision::Explained, GeneratorFormat::Homogeneous);
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn nli_source() {
        let s = NliSample {
            id: "n".into(),
            premise: "p".into(),
            hypothesis: "h".into(),
            label: NliLabel::Neutral,
            explanations: vec!["x".into()],
        };
        assert_eq!(generator_source(&s.clone().into()), "nli p h");
        let c = build_classifier_inputs(&s.into(), ClassifierMode::QaOnly, &Symbols::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].input_text, "[CLS] p [SEP] h [EOS]");
        assert_eq!(c[0].label, 1);
    }

    #[test]
    fn retrieval_prefers_overlap_then_corpus_order() {
        let corpus = vec!["x y z".to_string(), "a b".to_string()];
        assert_eq!(retrieve_question_context("x y", &corpus, 1).unwrap(), "x y z");
        let tied = vec!["a c".to_string(), "a d".to_string()];
        assert_eq!(retrieve_question_context("a", &tied, 1).unwrap(), "a c");
        assert!(matches!(retrieve_question_context("a", &[], 1), Err(Error::Retrieval(_))));
    }

    #[test]
    fn retrieval_top_k_exceeding_corpus_returns_all_in_score_order() {
        // question "a b c": "c x" -> 1/2, "a b c" -> 3/3, "z" -> 0/1
        let corpus = vec!["c x".to_string(), "a b c".to_string(), "z".to_string()];
        assert_eq!(
            retrieve_question_context("a b c", &corpus, 10).unwrap(),
            "a b c c x z"
        );
    }

    #[test]
    fn esnli_filter_drops_copies_only() {
        let mut s = NliSample {
            id: "1".into(),
            premise: "A man  sleeps.".into(),
            hypothesis: "Someone rests.".into(),
            label: NliLabel::Entailment,
            explanations: vec!["P. A man sleeps.".into()],
        };
        assert!(esnli_copies_input(&s));
        s.explanations = vec!["sleeping is resting".into()];
        assert!(!esnli_copies_input(&s));
        s.explanations = vec!["a man sleeps.".into()];
        assert!(!esnli_copies_input(&s), "containment is case-sensitive");
    }

    #[test]
    fn strip_prefix() {
        assert_eq!(strip_explanation_prefix("My commonsense tells me that x y"), "x y");
        assert_eq!(
            strip_explanation_prefix("The answer is B. My commonsense tells me that x"),
            "x"
        );
        assert_eq!(strip_explanation_prefix("plain"), "plain");
    }
}
