//! Agreement and utility evaluation, and ablation sweeps over engine settings.
//!
//! Each sample is rendered through a template twice: once as is and once with
//! every templated field abstracted. Both prompts go to the upstream model,
//! and the two answers are compared (agreement) and, when a reference is
//! given, each is scored against it (utility).

pub mod metrics;
pub mod templates;
pub mod upstream;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{reduction_pct, AbstractionConfig, Abstractor, ConfigError, EditKind, Objective};
pub use metrics::{agreement_accuracy, extract_label, lcs_len, rouge_l, rouge_n, token_f1, Scores};
pub use templates::{render_template, TemplateSpec};
pub use upstream::{ChatCompletions, Echo, Upstream, UpstreamError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("template needs field {0:?}")]
    MissingField(String),
    #[error("malformed template {0:?}")]
    BadTemplate(String),
    #[error("output lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("unknown ablation axis {0:?}")]
    UnknownAxis(String),
    #[error("corpus line {line_no}: {source}")]
    Corpus {
        line_no: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One corpus line: `{"id": "...", "fields": {"sentence": "..."}, "reference": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    #[serde(alias = "fields_map")]
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl EvalSample {
    pub fn new(id: impl Into<String>, fields: &[(&str, &str)]) -> Self {
        EvalSample {
            id: id.into(),
            fields: fields.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            reference: None,
        }
    }
}

/// Read a JSON-lines corpus; blank lines are skipped.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<EvalSample>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::Corpus { line_no: n + 1, source })?);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<EvalSample>, EvalError> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// ROUGE-1, ROUGE-2 and ROUGE-L F-measures.
    Rouge,
    /// Bag-of-words token F1.
    F1,
    /// Label agreement; needs a template with labels.
    Acc,
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rouge" => Ok(Metric::Rouge),
            "f1" => Ok(Metric::F1),
            "acc" | "accuracy" => Ok(Metric::Acc),
            other => Err(EvalError::UnknownMetric(other.to_string())),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>, EvalError> {
    let mut out = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Metric::from_str)
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// Per-sample metric values in `[0, 1]`; absent when not requested.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

impl MetricValues {
    pub fn compute(pred: &str, reference: &str, metrics: &[Metric], labels: &[String]) -> Self {
        let mut v = MetricValues::default();
        for m in metrics {
            match m {
                Metric::Rouge => {
                    v.rouge1 = Some(rouge_n(pred, reference, 1).f_measure);
                    v.rouge2 = Some(rouge_n(pred, reference, 2).f_measure);
                    v.rouge_l = Some(rouge_l(pred, reference).f_measure);
                }
                Metric::F1 => v.f1 = Some(token_f1(pred, reference)),
                Metric::Acc if !labels.is_empty() => {
                    let same = extract_label(pred, labels) == extract_label(reference, labels);
                    v.acc = Some(if same { 1.0 } else { 0.0 });
                }
                Metric::Acc => {}
            }
        }
        v
    }

    /// The task's headline number: label agreement for classification,
    /// otherwise ROUGE-L, then F1, then ROUGE-1.
    pub fn primary(&self) -> Option<f64> {
        self.acc.or(self.rouge_l).or(self.f1).or(self.rouge1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub original_prompt: String,
    pub abstracted_prompt: String,
    pub original_tokens: usize,
    pub abstracted_tokens: usize,
    pub original_chars: usize,
    pub abstracted_chars: usize,
    pub token_reduction_pct: f64,
    pub char_reduction_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstracted_response: Option<String>,
    /// Abstracted-prompt answer scored against the original-prompt answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<MetricValues>,
    /// Two answers to the original prompt scored against each other.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_bound: Option<MetricValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_original: Option<MetricValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_abstracted: Option<MetricValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Means in percent over the rows that carry each metric.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

fn mean_pct<'a>(values: impl Iterator<Item = Option<f64>> + 'a) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| 100.0 * sum / n as f64)
}

impl MetricMeans {
    fn over<'a>(values: impl Iterator<Item = &'a MetricValues> + Clone) -> Option<Self> {
        let means = MetricMeans {
            rouge1: mean_pct(values.clone().map(|v| v.rouge1)),
            rouge2: mean_pct(values.clone().map(|v| v.rouge2)),
            rouge_l: mean_pct(values.clone().map(|v| v.rouge_l)),
            f1: mean_pct(values.clone().map(|v| v.f1)),
            acc: mean_pct(values.map(|v| v.acc)),
        };
        (means != MetricMeans::default()).then_some(means)
    }

    pub fn primary(&self) -> Option<f64> {
        self.acc.or(self.rouge_l).or(self.f1).or(self.rouge1)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    pub failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<MetricMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_bound: Option<MetricMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_original: Option<MetricMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_abstracted: Option<MetricMeans>,
    /// Headline agreement in percent, see [`MetricValues::primary`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_agreement: Option<f64>,
    /// Mean of per-sample prompt reductions, over every sample.
    pub mean_token_reduction_pct: f64,
    pub mean_char_reduction_pct: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[SampleRow]) -> Self {
        let agreement = MetricMeans::over(rows.iter().filter_map(|r| r.agreement.as_ref()));
        let mean = |f: fn(&SampleRow) -> f64| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / rows.len() as f64
            }
        };
        Aggregates {
            samples: rows.len(),
            failed: rows.iter().filter(|r| r.error.is_some()).count(),
            mean_agreement: agreement.and_then(|a| a.primary()),
            agreement,
            upper_bound: MetricMeans::over(rows.iter().filter_map(|r| r.upper_bound.as_ref())),
            utility_original: MetricMeans::over(rows.iter().filter_map(|r| r.utility_original.as_ref())),
            utility_abstracted: MetricMeans::over(rows.iter().filter_map(|r| r.utility_abstracted.as_ref())),
            mean_token_reduction_pct: mean(|r| r.token_reduction_pct),
            mean_char_reduction_pct: mean(|r| r.char_reduction_pct),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub template: String,
    pub upstream: String,
    pub config: AbstractionConfig,
    pub aggregates: Aggregates,
    pub samples: Vec<SampleRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    /// Query the original prompt twice to bound agreement from above.
    /// Skipped for deterministic upstreams.
    pub upper_bound: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: vec![Metric::Rouge, Metric::F1, Metric::Acc],
            upper_bound: false,
        }
    }
}

/// Abstract every field the template uses, then render.
pub fn abstract_sample(
    template: &TemplateSpec,
    sample: &EvalSample,
    abstractor: &Abstractor,
) -> Result<(String, String), EvalError> {
    let original = render_template(template, sample)?;
    let mut abstracted_fields = BTreeMap::new();
    for name in template.fields()? {
        if let Some(value) = sample.fields.get(name) {
            abstracted_fields.insert(name, abstractor.abstract_query(value).abstracted);
        }
    }
    let abstracted = template.render_with(|name| abstracted_fields.get(name).map(String::as_str))?;
    Ok((original, abstracted))
}

fn eval_sample(
    sample: &EvalSample,
    template: &TemplateSpec,
    abstractor: &Abstractor,
    upstream: &dyn Upstream,
    options: &EvalOptions,
) -> SampleRow {
    let vocab = abstractor.vocab();
    let mut row = SampleRow {
        id: sample.id.clone(),
        original_prompt: String::new(),
        abstracted_prompt: String::new(),
        original_tokens: 0,
        abstracted_tokens: 0,
        original_chars: 0,
        abstracted_chars: 0,
        token_reduction_pct: 0.0,
        char_reduction_pct: 0.0,
        original_response: None,
        abstracted_response: None,
        agreement: None,
        upper_bound: None,
        utility_original: None,
        utility_abstracted: None,
        error: None,
    };
    let (original, abstracted) = match abstract_sample(template, sample, abstractor) {
        Ok(pair) => pair,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.original_tokens = vocab.count_tokens(&original);
    row.abstracted_tokens = vocab.count_tokens(&abstracted);
    row.original_chars = crate::bpe::count_chars(&original);
    row.abstracted_chars = crate::bpe::count_chars(&abstracted);
    row.token_reduction_pct = reduction_pct(row.original_tokens, row.abstracted_tokens);
    row.char_reduction_pct = reduction_pct(row.original_chars, row.abstracted_chars);
    row.original_prompt = original;
    row.abstracted_prompt = abstracted;

    let answers = upstream
        .complete(&row.original_prompt)
        .and_then(|a| Ok((a, upstream.complete(&row.abstracted_prompt)?)));
    let (a_orig, a_abs) = match answers {
        Ok(pair) => pair,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    let labels = &template.labels;
    row.agreement = Some(MetricValues::compute(&a_abs, &a_orig, &options.metrics, labels));
    if options.upper_bound && !upstream.deterministic() {
        match upstream.complete(&row.original_prompt) {
            Ok(again) => row.upper_bound = Some(MetricValues::compute(&again, &a_orig, &options.metrics, labels)),
            Err(e) => row.error = Some(e.to_string()),
        }
    }
    if let Some(reference) = &sample.reference {
        row.utility_original = Some(MetricValues::compute(&a_orig, reference, &options.metrics, labels));
        row.utility_abstracted = Some(MetricValues::compute(&a_abs, reference, &options.metrics, labels));
    }
    row.original_response = Some(a_orig);
    row.abstracted_response = Some(a_abs);
    row
}

/// Evaluate a corpus. Samples run in parallel; rows come back ordered by id.
/// Upstream failures are recorded on the row and do not stop the run.
pub fn run_eval(
    corpus: &[EvalSample],
    template: &TemplateSpec,
    abstractor: &Abstractor,
    upstream: &dyn Upstream,
    options: &EvalOptions,
) -> Result<AgreementReport, EvalError> {
    template.fields()?;
    let mut samples: Vec<SampleRow> = corpus
        .par_iter()
        .map(|s| eval_sample(s, template, abstractor, upstream, options))
        .collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(AgreementReport {
        template: template.name.clone(),
        upstream: upstream.name().to_string(),
        config: abstractor.config().clone(),
        aggregates: Aggregates::from_rows(&samples),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Ops,
    Alpha,
    Objective,
}

impl FromStr for Axis {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ops" | "operations" => Ok(Axis::Ops),
            "alpha" => Ok(Axis::Alpha),
            "objective" => Ok(Axis::Objective),
            other => Err(EvalError::UnknownAxis(other.to_string())),
        }
    }
}

impl Axis {
    /// The settings swept along this axis, each applied on top of `base`.
    pub fn settings(self, base: &AbstractionConfig) -> Vec<(String, AbstractionConfig)> {
        let with = |f: &dyn Fn(&mut AbstractionConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::Ops => vec![
                ("transform".into(), with(&|c| c.enabled_ops = vec![EditKind::Transform])),
                ("delete".into(), with(&|c| c.enabled_ops = vec![EditKind::Delete])),
                (
                    "both".into(),
                    with(&|c| c.enabled_ops = vec![EditKind::Delete, EditKind::Transform]),
                ),
            ],
            Axis::Alpha => [0.99, 0.95, 0.90]
                .into_iter()
                .map(|a| (format!("{a:.2}"), with(&|c| c.alpha = a)))
                .collect(),
            Axis::Objective => vec![
                ("token".into(), with(&|c| c.objective = Objective::Token)),
                ("char".into(), with(&|c| c.objective = Objective::Char)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub alpha: f64,
    pub objective: Objective,
    pub ops: String,
    pub samples: usize,
    pub failed: usize,
    /// Signed change in prompt length, in percent (negative means shorter).
    pub length_tokens_pct: f64,
    pub length_chars_pct: f64,
    #[serde(default)]
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub template: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "setting",
            "alpha",
            "objective",
            "ops",
            "samples",
            "failed",
            "length_tokens_pct",
            "length_chars_pct",
            "agreement",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.setting.clone(),
                r.alpha.to_string(),
                format!("{:?}", r.objective).to_lowercase(),
                r.ops.clone(),
                r.samples.to_string(),
                r.failed.to_string(),
                format!("{:.2}", r.length_tokens_pct),
                format!("{:.2}", r.length_chars_pct),
                r.agreement.map(|a| format!("{a:.2}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Run one evaluation per setting of `axis`, varying only that setting.
pub fn ablation_sweep(
    corpus: &[EvalSample],
    template: &TemplateSpec,
    base: &Abstractor,
    upstream: &dyn Upstream,
    axis: Axis,
    options: &EvalOptions,
) -> Result<AblationTable, EvalError> {
    let mut rows = Vec::new();
    for (setting, config) in axis.settings(base.config()) {
        let abstractor = base.reconfigure(config)?;
        let report = run_eval(corpus, template, &abstractor, upstream, options)?;
        let c = abstractor.config();
        rows.push(AblationRow {
            setting,
            alpha: c.alpha,
            objective: c.objective,
            ops: c.enabled_ops.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+"),
            samples: report.aggregates.samples,
            failed: report.aggregates.failed,
            length_tokens_pct: -report.aggregates.mean_token_reduction_pct,
            length_chars_pct: -report.aggregates.mean_char_reduction_pct,
            agreement: report.aggregates.mean_agreement,
        });
    }
    Ok(AblationTable {
        axis,
        template: template.name.clone(),
        rows,
    })
}
