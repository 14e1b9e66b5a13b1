//! Prompt texts and the helpers that fill and (for the mocks) parse them.

/// System prompt used for every rephrasing call.
pub const REPHRASE_SYSTEM: &str = "You are a medical artificial intelligence assistant. The assistant gives truthful, detailed, and professional answers to the requests.";

pub const HIGH_QUALITY: &str = "For the following paragraph give me a diverse paraphrase of the same in high-quality English language as in clinical notes written by medical professionals:";
pub const REARRANGED_STRUCTURE: &str = "Rewrite the following paragraph by rearranging sentences and phrases, while retaining the original clinical content and meaning:";
pub const MINIMAL_CHANGES: &str = "Rephrase the following paragraph with minimal changes, keeping the original structure and meaning intact. Make only slight adjustments for clarity and conciseness while preserving the clinical details:";
pub const FORMAL_CLINICAL: &str = "Paraphrase the following paragraph using strictly formal clinical documentation language, maintaining the same level of detail and medical accuracy:";
pub const SUBSTANTIAL_REVISION: &str = "Produce a substantially revised version of the following paragraph in professional clinical English, changing sentence structure and vocabulary while preserving all critical medical details:";
pub const SIMPLER_ENGLISH: &str = "Paraphrase the following paragraph into simpler clinical English, minimizing jargon and long sentences but keeping the key medical details:";

/// Separator between an instruction and the passage it applies to.
pub const PASSAGE_SEPARATOR: &str = "\n\n";

pub const ENTAILMENT_TEMPLATE: &str = "You are an expert on natural language entailment.
Your task is to deduce whether premise statements entail hypotheses.
Return only '1' if the hypothesis can be fully entailed by the premise.
Return only '0' if the hypothesis contains information that cannot be entailed by the premise.
Generate the answer in JSON format with the following keys:
'entailment_prediction': 1 or 0, whether the claim can be entailed.
Only return the JSON-formatted answer and nothing else.

Premise: {{premise}}
Hypothesis: {{hypothesis}}

Here is the JSON-formatted answer:
";

pub const DECOMPOSITION_TEMPLATE: &str = "Please breakdown the following text into independent facts as a string delimited by \"//\" to separate the facts

Example 1:
Note: \"There is a dense consolidation in the left lower lobe.\"

Atomic facts:
There is a consolidation. // The consolidation is dense. // The consolidation is on the left. // The consolidation is in a lobe. // The consolidation is in the lower portion of the left lobe.

Example 2:

Note: \"The patient has been having intermittent shortness of breath for the last two years.\"

Atomic facts:
The patient has been having shortness of breath. // The shortness of breath is intermittent. // The shortness of breath has been present for the last two years.

Do not include any other text, or say \"Here is the list...\"

Note: {{note}}
";

pub fn rephrase_prompt(instruction: &str, passage: &str) -> String {
    format!("{instruction}{PASSAGE_SEPARATOR}{passage}")
}

pub fn entailment_prompt(premise: &str, hypothesis: &str) -> String {
    let (prefix, rest) = template_parts(ENTAILMENT_TEMPLATE, "{{premise}}");
    let (middle, suffix) = template_parts(rest, "{{hypothesis}}");
    format!("{prefix}{premise}{middle}{hypothesis}{suffix}")
}

pub fn decomposition_prompt(note: &str) -> String {
    let (prefix, suffix) = template_parts(DECOMPOSITION_TEMPLATE, "{{note}}");
    format!("{prefix}{note}{suffix}")
}

fn template_parts<'a>(template: &'a str, slot: &str) -> (&'a str, &'a str) {
    let at = template.find(slot).expect("slot present in template");
    (&template[..at], &template[at + slot.len()..])
}

/// Recovers `(premise, hypothesis)` from a filled entailment prompt.
pub fn parse_entailment_prompt(prompt: &str) -> Option<(&str, &str)> {
    let (prefix, rest) = template_parts(ENTAILMENT_TEMPLATE, "{{premise}}");
    let (middle, suffix) = template_parts(rest, "{{hypothesis}}");
    let body = prompt.strip_prefix(prefix)?.strip_suffix(suffix)?;
    let at = body.rfind(middle)?;
    Some((&body[..at], &body[at + middle.len()..]))
}

/// Recovers the note from a filled decomposition prompt.
pub fn parse_decomposition_prompt(prompt: &str) -> Option<&str> {
    let (prefix, suffix) = template_parts(DECOMPOSITION_TEMPLATE, "{{note}}");
    prompt.strip_prefix(prefix)?.strip_suffix(suffix)
}
