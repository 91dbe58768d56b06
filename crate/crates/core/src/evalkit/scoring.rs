//! Answering task records with a model: greedy generation for completion and
//! numeric tasks, likelihood ranking for multiple choice.

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::peft::PeftSet;
use crate::tokenizer;

use super::metrics::extract_number;

/// Scores closer than this are ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

/// A base model with optional attached adapters.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a TransformerModel,
    pub peft: Option<&'a PeftSet>,
    pub max_new_tokens: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a TransformerModel, peft: Option<&'a PeftSet>) -> Self {
        Scorer {
            model,
            peft,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    fn context_tokens(text: &str) -> Vec<usize> {
        let mut tokens = vec![tokenizer::BOS];
        tokens.extend(tokenizer::encode(text));
        tokens
    }

    /// Greedy continuation of `BOS + context`, decoded without special tokens.
    pub fn complete(&self, context: &str) -> Result<String> {
        let prompt = Self::context_tokens(context);
        let out = self
            .model
            .generate(&prompt, self.max_new_tokens, self.peft)?;
        Ok(tokenizer::decode(&out))
    }

    pub fn answer_number(&self, question: &str) -> Result<Option<f64>> {
        Ok(extract_number(&self.complete(question)?))
    }

    pub fn choose(&self, question: &str, choices: &[String]) -> Result<usize> {
        score_multiple_choice(self.model, self.peft, question, choices)
    }
}

/// Index of the best score; entries within [`TIE_TOLERANCE`] of the running
/// best do not displace it, so ties go to the lowest index.
pub fn pick_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if s > scores[b] + TIE_TOLERANCE => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Mean per-token log-likelihood of each choice continuing the question.
pub fn choice_scores(
    model: &TransformerModel,
    peft: Option<&PeftSet>,
    question: &str,
    choices: &[String],
) -> Result<Vec<f64>> {
    if choices.len() < 2 {
        return Err(Error::Usage(
            "multiple choice needs at least two choices".into(),
        ));
    }
    let context = Scorer::context_tokens(question);
    choices
        .iter()
        .map(|c| {
            if c.is_empty() {
                return Err(Error::Usage("choice text must be non-empty".into()));
            }
            let (ll, count) =
                model.continuation_log_likelihood(&context, &tokenizer::encode(c), peft)?;
            Ok(ll / count as f64)
        })
        .collect()
}

/// Choice with the highest length-normalized log-likelihood.
pub fn score_multiple_choice(
    model: &TransformerModel,
    peft: Option<&PeftSet>,
    question: &str,
    choices: &[String],
) -> Result<usize> {
    let scores = choice_scores(model, peft, question, choices)?;
    Ok(pick_best(&scores).expect("at least two scores"))
}
