//! Prompt templates for the evaluation tasks.
//!
//! Patterns use `{field}` placeholders; `{field?}` may be absent, in which
//! case it renders empty and trailing whitespace is dropped. `{{` and `}}`
//! are literal braces.

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalSample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub name: String,
    pub pattern: String,
    /// Classification labels, in matching order. Empty for generation tasks.
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Piece<'a> {
    Literal(String),
    Field { name: &'a str, optional: bool },
}

impl TemplateSpec {
    pub fn new(name: &str, pattern: &str, labels: &[&str]) -> Self {
        TemplateSpec {
            name: name.to_string(),
            pattern: pattern.to_string(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        }
    }

    /// Built-in templates: sst2, imdb, agnews, qnli, mnli, rte, cnndm, xsum,
    /// squad2, acp, alpaca.
    pub fn builtin(name: &str) -> Option<Self> {
        const SENTIMENT: &[&str] = &["positive", "negative"];
        // "not entailment" contains "entailment", so it must be tried first.
        const ENTAILMENT: &[&str] = &["not entailment", "entailment"];
        let t = match name.to_ascii_lowercase().as_str() {
            "sst2" | "sst-2" => Self::new("sst2", "{sentence} \n (Positive or Negative)", SENTIMENT),
            "imdb" => Self::new("imdb", "{sentence} \n (Positive or Negative)", SENTIMENT),
            "agnews" => Self::new(
                "agnews",
                "{sentence} \n (Politics/Sports/Business/Science)",
                &["politics", "sports", "business", "science"],
            ),
            "qnli" => Self::new("qnli", "{question} \n {sentence} \n (Entailment/Not Entailment)", ENTAILMENT),
            "mnli" => Self::new(
                "mnli",
                "{premise} \n {hypothesis} \n (Entailment/Neutral/Contradiction)",
                &["entailment", "neutral", "contradiction"],
            ),
            "rte" => Self::new("rte", "{sentence1} \n {sentence2} \n (Entailment/Not Entailment)", ENTAILMENT),
            "cnndm" => Self::new("cnndm", "{article}\n TL;DR:", &[]),
            "xsum" => Self::new("xsum", "{document}\n TL;DR:", &[]),
            "squad2" | "squad" => Self::new("squad2", "{context}\n Extract answer for: {question}", &[]),
            "acp" => Self::new("acp", "{prompt}", &[]),
            "alpaca" => Self::new("alpaca", "{prompt} {input?}", &[]),
            _ => return None,
        };
        Some(t)
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["sst2", "imdb", "agnews", "qnli", "mnli", "rte", "cnndm", "xsum", "squad2", "acp", "alpaca"]
    }

    pub(crate) fn pieces(&self) -> Result<Vec<Piece<'_>>, EvalError> {
        let bad = || EvalError::BadTemplate(self.pattern.clone());
        let mut out = Vec::new();
        let mut literal = String::new();
        let mut rest = self.pattern.as_str();
        while let Some(pos) = rest.find(['{', '}']) {
            literal.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if tail.starts_with("{{") || tail.starts_with("}}") {
                literal.push_str(&tail[..1]);
                rest = &tail[2..];
                continue;
            }
            if tail.starts_with('}') {
                return Err(bad());
            }
            let end = tail.find('}').ok_or_else(bad)?;
            let inner = &tail[1..end];
            let (name, optional) = match inner.strip_suffix('?') {
                Some(n) => (n, true),
                None => (inner, false),
            };
            if name.is_empty() || name.contains(['{', ' ']) {
                return Err(bad());
            }
            if !literal.is_empty() {
                out.push(Piece::Literal(std::mem::take(&mut literal)));
            }
            out.push(Piece::Field { name, optional });
            rest = &tail[end + 1..];
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            out.push(Piece::Literal(literal));
        }
        Ok(out)
    }

    /// Field names referenced by the pattern, in order.
    pub fn fields(&self) -> Result<Vec<&str>, EvalError> {
        Ok(self
            .pieces()?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Field { name, .. } => Some(name),
                Piece::Literal(_) => None,
            })
            .collect())
    }

    /// Substitute fields, looking each one up through `lookup`.
    pub fn render_with<'s>(
        &self,
        mut lookup: impl FnMut(&str) -> Option<&'s str>,
    ) -> Result<String, EvalError> {
        let mut out = String::new();
        let mut trim = false;
        for piece in self.pieces()? {
            match piece {
                Piece::Literal(l) => out.push_str(&l),
                Piece::Field { name, optional } => match lookup(name) {
                    Some(v) => out.push_str(v),
                    None if optional => trim = true,
                    None => return Err(EvalError::MissingField(name.to_string())),
                },
            }
        }
        if trim {
            out.truncate(out.trim_end().len());
        }
        Ok(out)
    }
}

/// Render `spec` with the fields of `sample`.
pub fn render_template(spec: &TemplateSpec, sample: &EvalSample) -> Result<String, EvalError> {
    spec.render_with(|name| sample.fields.get(name).map(String::as_str))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(fields: &[(&str, &str)]) -> EvalSample {
        EvalSample {
            id: "0".into(),
            fields: fields.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            reference: None,
        }
    }

    #[test]
    fn renders_builtins() {
        let sst2 = TemplateSpec::builtin("sst2").unwrap();
        assert_eq!(
            render_template(&sst2, &sample(&[("sentence", "great movie")])).unwrap(),
            "great movie \n (Positive or Negative)"
        );
        let squad = TemplateSpec::builtin("squad2").unwrap();
        assert_eq!(
            render_template(&squad, &sample(&[("context", "C"), ("question", "Q?")])).unwrap(),
            "C\n Extract answer for: Q?"
        );
        let alpaca = TemplateSpec::builtin("alpaca").unwrap();
        assert_eq!(render_template(&alpaca, &sample(&[("prompt", "Do it.")])).unwrap(), "Do it.");
        assert_eq!(
            render_template(&alpaca, &sample(&[("prompt", "Sum:"), ("input", "1 2")])).unwrap(),
            "Sum: 1 2"
        );
        for name in TemplateSpec::builtin_names() {
            assert!(TemplateSpec::builtin(name).unwrap().fields().is_ok());
        }
        assert!(TemplateSpec::builtin("nope").is_none());
    }

    #[test]
    fn missing_field() {
        let sst2 = TemplateSpec::builtin("sst2").unwrap();
        assert!(matches!(
            render_template(&sst2, &sample(&[])),
            Err(EvalError::MissingField(f)) if f == "sentence"
        ));
    }

    #[test]
    fn braces_and_errors() {
        let t = TemplateSpec::new("t", "{{x}} {a}", &[]);
        assert_eq!(render_template(&t, &sample(&[("a", "1")])).unwrap(), "{x} 1");
        for bad in ["{", "}", "{}", "{a b}"] {
            let t = TemplateSpec::new("t", bad, &[]);
            assert!(matches!(t.fields(), Err(EvalError::BadTemplate(_))), "{bad}");
        }
    }
}
