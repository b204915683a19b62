use super::model::TinyLm;
use super::tokenizer::{Tokenizer, EOS};
use super::train::prompt_ids;
use crate::error::{Error, Result};
use crate::label::{Label, Prediction};
use crate::textualize::InstructionExample;

/// Greedy decoding: append the argmax token until EOS or the budget runs out.
/// Returns the generated ids, without the prompt and without EOS.
pub fn generate_ids(model: &TinyLm, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
    let limit = model.config.max_seq_len;
    if prompt.len() + max_new_tokens > limit {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + max_new_tokens,
            max: limit,
        });
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let logits = model.forward(&ids)?;
        let last = logits.row(logits.nrows() - 1);
        // first maximum wins, so ties resolve to the lower id
        let next = last
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

pub fn generate(model: &TinyLm, tk: &Tokenizer, prompt: &[u32], max_new_tokens: usize) -> Result<String> {
    Ok(tk.decode(&generate_ids(model, prompt, max_new_tokens)?))
}

/// Scan for the whole words "long" or "short", case-insensitively; the first
/// one found decides.
pub fn map_output_to_label(text: &str) -> Prediction {
    text.split(|c: char| !c.is_alphanumeric())
        .find_map(|w| {
            if w.eq_ignore_ascii_case("long") {
                Some(Prediction::Label(Label::Long))
            } else if w.eq_ignore_ascii_case("short") {
                Some(Prediction::Label(Label::Short))
            } else {
                None
            }
        })
        .unwrap_or(Prediction::ParseFailure)
}

pub const DEFAULT_MAX_NEW_TOKENS: usize = 4;

/// Prompt the model with an example and map its answer to a label. Returns
/// the raw generated text alongside.
pub fn predict_example(
    model: &TinyLm,
    tk: &Tokenizer,
    ex: &InstructionExample,
    max_new_tokens: usize,
) -> Result<(String, Prediction)> {
    let prompt = prompt_ids(tk, &ex.instruction, &ex.input);
    let budget = max_new_tokens.min(model.config.max_seq_len.saturating_sub(prompt.len()));
    let text = generate(model, tk, &prompt, budget)?;
    let pred = map_output_to_label(&text);
    Ok((text, pred))
}
