//! The fidelity-constrained compression prompt.

use crate::error::{Error, Result};

const TEMPLATE: &str = "\
Task: Faithfully compress long essays into a maximum of {CEILING} tokens without improving, embellishing, or altering the author\u{2019}s intent or claims.

Guiding principles:

Fidelity over enhancement: preserve the original thesis, main arguments, structure, tone, and level of certainty. Do not strengthen, weaken, correct, or \u{201c}polish\u{201d} the reasoning, style, or rhetoric beyond what is strictly necessary for brevity and coherence.

No new content: do not add interpretations, examples, transitions, or background not present in the original. Do not infer or resolve ambiguities\u{2014}mirror them.

Preserve key details: retain essential evidence, data, dates, names, definitions, and technical terms; keep figures and claims unchanged.

Maintain voice and stance: keep register, perspective, and nuance; avoid stylistic flourishes not in the source. Only paraphrase to reduce redundancy.

Work step-by-step:

Identify the thesis, primary arguments, and overall structure, noting tone and qualifiers.

Select only the most critical supporting evidence and examples that directly substantiate those arguments.

Rewrite concisely, removing repetition and peripheral material while preserving meaning, emphasis, causality, and logical flow. Do not upgrade clarity by reworking the argument\u{2019}s substance.

Review for fidelity: ensure no new claims were introduced, none were omitted or altered, and qualifiers and uncertainties are intact.

Trim to \u{2264} {CEILING} tokens. If further cuts are needed, remove lower-priority details before affecting core arguments, evidence, tone, or stance.

Output format:

Output only the compressed essay text, in coherent natural language.

No meta commentary, explanations, or lists\u{2014}just the compressed essay.

One paragraph or a few clear paragraphs, totaling no more than {CEILING} tokens.

Do not add titles or summaries beyond what the original conveys.

Example:

Input (excerpt):

[Full essay text about the impact of climate change on global agriculture\u{2014}several paragraphs, over 2,000 tokens.]

Output:

The effects of climate change on global agriculture are profound, posing risks to food security and rural livelihoods. Rising temperatures and shifting weather patterns threaten crop yields, with some regions experiencing drought while others face floods. Adaptation strategies include developing drought-resistant crops and improving irrigation efficiency. Without cohesive global action to mitigate emissions and adapt agricultural practices, the sector remains vulnerable, endangering both economic stability and human nutrition.";

/// The compression prompt with every token ceiling set to `target_tokens`.
pub fn build_prompt(target_tokens: usize) -> Result<String> {
    if target_tokens == 0 {
        return Err(Error::Precondition("prompt token ceiling must be >= 1".into()));
    }
    Ok(TEMPLATE.replace("{CEILING}", &target_tokens.to_string()))
}
