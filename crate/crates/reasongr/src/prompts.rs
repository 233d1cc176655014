//! Prompt composition: five task templates crossed with five chain-of-thought
//! additions, optional few-shot examples, and target formatting with or
//! without a reasoning trace.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DocId;
use crate::error::{Error, Result};

pub const TASK_TEMPLATES: [&str; 5] = [
    "Answer the query with a document ID.",
    "Generate the document ID that answers the question.",
    "Based on the question, predict the document ID.",
    "Retrieve a document ID that fits the query.",
    "Using the question, find the document ID.",
];

pub const COT_INSTRUCTIONS: [&str; 5] = [
    "Use step-by-step reasoning.",
    "You need to explain your answer.",
    "Think this through carefully.",
    "Let's think step-by-step.",
    "Explain your reasoning before answering.",
];

/// Marker between a reasoning trace and the final docid in CoT targets.
pub const TRACE_SEPARATOR: &str = " => ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Plain,
    Fewshot,
    Cot,
    FewshotCot,
}

impl PromptMode {
    pub fn uses_cot(self) -> bool {
        matches!(self, PromptMode::Cot | PromptMode::FewshotCot)
    }

    pub fn uses_fewshot(self) -> bool {
        matches!(self, PromptMode::Fewshot | PromptMode::FewshotCot)
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(PromptMode::Plain),
            "fewshot" => Ok(PromptMode::Fewshot),
            "cot" => Ok(PromptMode::Cot),
            "fewshot_cot" => Ok(PromptMode::FewshotCot),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected plain, fewshot, cot, fewshot_cot)"
            ))),
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PromptMode::Plain => "plain",
            PromptMode::Fewshot => "fewshot",
            PromptMode::Cot => "cot",
            PromptMode::FewshotCot => "fewshot_cot",
        };
        f.write_str(s)
    }
}

/// A composed prompt and its (optionally trace-carrying) target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSample {
    pub input_text: String,
    pub target_text: String,
    pub mode: PromptMode,
    pub template_id: usize,
    pub cot_id: Option<usize>,
}

/// All 25 (template, cot) pairs in lexicographic order.
pub fn enumerate_combinations() -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(25);
    for t in 0..TASK_TEMPLATES.len() {
        for c in 0..COT_INSTRUCTIONS.len() {
            out.push((t, c));
        }
    }
    out
}

/// Composes a prompt with template and CoT ids drawn uniformly from the 5×5
/// grid using the supplied rng state. Few-shot modes require examples.
pub fn compose_prompt<R: Rng>(
    rng: &mut R,
    query: &str,
    mode: PromptMode,
    fewshot_examples: &[(String, String)],
) -> Result<PromptSample> {
    let combo = rng.gen_range(0..25usize);
    let (template_id, cot_id) = (combo / 5, combo % 5);
    compose_prompt_with(template_id, cot_id, query, mode, fewshot_examples)
}

/// Deterministic composition with explicit template/CoT choices.
pub fn compose_prompt_with(
    template_id: usize,
    cot_id: usize,
    query: &str,
    mode: PromptMode,
    fewshot_examples: &[(String, String)],
) -> Result<PromptSample> {
    if mode.uses_fewshot() && fewshot_examples.is_empty() {
        return Err(Error::Config(
            "few-shot mode requires a nonempty example list".into(),
        ));
    }

    let mut input = TASK_TEMPLATES[template_id].to_string();
    if mode.uses_cot() {
        input.push(' ');
        input.push_str(COT_INSTRUCTIONS[cot_id]);
    }
    if mode.uses_fewshot() {
        for (q, surface) in fewshot_examples {
            input.push('\n');
            input.push_str(&format!("Query: {q} Document ID: {surface}"));
        }
        input.push('\n');
    } else {
        input.push(' ');
    }
    input.push_str(&format!("Query: {query} Document ID:"));

    Ok(PromptSample {
        input_text: input,
        target_text: String::new(),
        mode,
        template_id,
        cot_id: mode.uses_cot().then_some(cot_id),
    })
}

impl PromptSample {
    pub fn with_target(mut self, target_text: String) -> Self {
        self.target_text = target_text;
        self
    }
}

/// Formats the expected output: the bare surface for non-CoT modes, or the
/// trace steps joined by `; ` followed by ` => ` and the surface.
pub fn format_target(docid: &DocId, trace: Option<&[String]>, mode: PromptMode) -> Result<String> {
    if !mode.uses_cot() {
        return Ok(docid.surface.clone());
    }
    let trace = trace.filter(|t| !t.is_empty()).ok_or_else(|| {
        Error::Invalid("cot target requires a nonempty reasoning trace".into())
    })?;
    Ok(format!(
        "{}{}{}",
        trace.join("; "),
        TRACE_SEPARATOR,
        docid.surface
    ))
}

/// Recovers the docid surface from a CoT target by splitting on the final
/// separator; non-CoT targets come back whole.
pub fn surface_from_target(target: &str) -> &str {
    match target.rfind(TRACE_SEPARATOR) {
        Some(pos) => &target[pos + TRACE_SEPARATOR.len()..],
        None => target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn docid(surface: &str) -> DocId {
        DocId {
            components: surface.split('-').map(str::to_string).collect(),
            surface: surface.to_string(),
        }
    }

    #[test]
    fn twenty_five_distinct_pairs_lexicographic() {
        let combos = enumerate_combinations();
        assert_eq!(combos.len(), 25);
        assert_eq!(combos[0], (0, 0));
        assert_eq!(combos[24], (4, 4));
        let set: std::collections::HashSet<_> = combos.iter().collect();
        assert_eq!(set.len(), 25);
    }

    #[test]
    fn plain_template_zero_prefix() {
        let s = compose_prompt_with(0, 0, "what was the revenue?", PromptMode::Plain, &[]).unwrap();
        assert!(s.input_text.starts_with("Answer the query with a document ID."));
        assert!(s.input_text.contains("Query: what was the revenue?"));
        assert!(s.input_text.ends_with("Document ID:"));
        assert_eq!(s.cot_id, None);
    }

    #[test]
    fn cot_instruction_included() {
        let s = compose_prompt_with(1, 3, "q", PromptMode::Cot, &[]).unwrap();
        assert!(s.input_text.contains("Let's think step-by-step."));
        assert_eq!(s.cot_id, Some(3));
    }

    #[test]
    fn fewshot_block_one_example_per_line() {
        let examples = vec![
            ("q1".to_string(), "adi-2009".to_string()),
            ("q2".to_string(), "ibm-2010".to_string()),
        ];
        let s = compose_prompt_with(2, 0, "q3", PromptMode::Fewshot, &examples).unwrap();
        assert!(s.input_text.contains("\nQuery: q1 Document ID: adi-2009\n"));
        assert!(s.input_text.contains("Query: q2 Document ID: ibm-2010"));
    }

    #[test]
    fn fewshot_without_examples_errors() {
        assert!(compose_prompt_with(0, 0, "q", PromptMode::Fewshot, &[]).is_err());
        assert!(compose_prompt_with(0, 0, "q", PromptMode::FewshotCot, &[]).is_err());
    }

    #[test]
    fn same_seed_same_sample() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let s1 = compose_prompt(&mut a, "q", PromptMode::Cot, &[]).unwrap();
        let s2 = compose_prompt(&mut b, "q", PromptMode::Cot, &[]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn target_formatting() {
        let id = docid("adi-2009-hedge");
        assert_eq!(
            format_target(&id, None, PromptMode::Plain).unwrap(),
            "adi-2009-hedge"
        );
        let trace = vec!["find hedging section".to_string(), "year is 2009".to_string()];
        assert_eq!(
            format_target(&id, Some(&trace), PromptMode::Cot).unwrap(),
            "find hedging section; year is 2009 => adi-2009-hedge"
        );
        assert!(format_target(&id, Some(&[]), PromptMode::Cot).is_err());
        assert!(format_target(&id, None, PromptMode::Cot).is_err());
    }

    #[test]
    fn target_parse_back_recovers_surface() {
        let id = docid("adi-2009-hedge");
        let trace = vec!["a => b inside".to_string(), "step".to_string()];
        let t = format_target(&id, Some(&trace), PromptMode::FewshotCot).unwrap();
        assert_eq!(surface_from_target(&t), "adi-2009-hedge");
        assert_eq!(surface_from_target("plain-surface"), "plain-surface");
    }

    #[test]
    fn uniform_over_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [[0usize; 5]; 5];
        for _ in 0..10_000 {
            let s = compose_prompt(&mut rng, "q", PromptMode::Cot, &[]).unwrap();
            counts[s.template_id][s.cot_id.unwrap()] += 1;
        }
        for row in counts {
            for c in row {
                let freq = c as f64 / 10_000.0;
                assert!((0.032..=0.048).contains(&freq), "combo frequency {freq}");
            }
        }
    }
}
