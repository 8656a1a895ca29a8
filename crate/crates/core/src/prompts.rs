//! Frozen prompt templates.
//!
//! Text is kept character-for-character, including the TeX-style quote
//! marks (``label" and `label'). The only substitutions are the label
//! placeholder, the rendered label list, example answers and the optional
//! preamble. Lines carry no trailing whitespace. Images are never part of
//! the text: requests list them as separate parts ahead of the prompt.

/// Bumped whenever any template text changes; part of cache keys.
pub const TEMPLATE_VERSION: &str = "v1";

pub const BINARY_INSTRUCTION: &str = "Answer with `Yes' or `No'.";
pub const MULTICLASS_INSTRUCTION: &str =
    "Answer with the exact sentiment label as it appears in the list.";

/// Instruction sent with the cluster images when generating a description.
pub fn description_prompt(label: &str) -> String {
    format!(
        "These are the examples of images with the sentiment of ``{label}\". \
         Based on these examples, what are the common features of images to be felt \
         ``{label}\" by its viewers? Do not reference example images directly."
    )
}

/// Reference-free variant of the description prompt (no images attached).
pub fn global_description_prompt(label: &str) -> String {
    format!("What are the common features of images to be felt ``{label}\" by its viewers?")
}

/// `[``a", ``b", ...]`
pub fn render_label_list(labels: &[impl AsRef<str>]) -> String {
    let items: Vec<String> = labels
        .iter()
        .map(|l| format!("``{}\"", l.as_ref()))
        .collect();
    format!("[{}]", items.join(", "))
}

fn binary_question(label: &str) -> String {
    format!("Question: Does this image match the sentiment label `{label}'? Answer:")
}

fn binary_icl_question(label: &str) -> String {
    format!("Question: Does this image matches the sentiment label '{label}'? Answer:")
}

fn multiclass_question(labels: &[impl AsRef<str>]) -> String {
    format!(
        "Question: Which of the sentiment labels in the following list does this image belong to? List: {} Answer:",
        render_label_list(labels)
    )
}

fn with_preamble(preamble: Option<&str>, body: String) -> String {
    match preamble {
        Some(p) => format!("{p}\n{body}"),
        None => body,
    }
}

/// Yes/No question for one candidate label, optionally preceded by a label
/// description.
pub fn binary_prompt(label: &str, preamble: Option<&str>) -> String {
    with_preamble(
        preamble,
        format!("{}\n\n{BINARY_INSTRUCTION}", binary_question(label)),
    )
}

/// Closed-list question over all candidate labels.
pub fn multiclass_prompt(labels: &[impl AsRef<str>], preamble: Option<&str>) -> String {
    with_preamble(
        preamble,
        format!(
            "{}\n\n{MULTICLASS_INSTRUCTION}",
            multiclass_question(labels)
        ),
    )
}

fn icl_block(index: usize, question: &str, answer: Option<&str>) -> String {
    match answer {
        Some(a) => format!("## Image {index}\n{question} {a}"),
        None => format!("## Image {index}\n{question}"),
    }
}

/// Few-shot Yes/No prompt. `example_answers[i]` is the gold answer of the
/// i-th example image for `label`; the test image is numbered last.
pub fn binary_icl_prompt(label: &str, example_answers: &[bool]) -> String {
    let q = binary_icl_question(label);
    let mut blocks: Vec<String> = example_answers
        .iter()
        .enumerate()
        .map(|(i, &yes)| icl_block(i + 1, &q, Some(if yes { "Yes" } else { "No" })))
        .collect();
    blocks.push(icl_block(example_answers.len() + 1, &q, None));
    blocks.push(BINARY_INSTRUCTION.to_string());
    blocks.join("\n\n")
}

/// Few-shot closed-list prompt. `example_labels[i]` is the gold label of the
/// i-th example image.
pub fn multiclass_icl_prompt(
    labels: &[impl AsRef<str>],
    example_labels: &[impl AsRef<str>],
) -> String {
    let q = multiclass_question(labels);
    let mut blocks: Vec<String> = example_labels
        .iter()
        .enumerate()
        .map(|(i, l)| icl_block(i + 1, &q, Some(l.as_ref())))
        .collect();
    blocks.push(icl_block(example_labels.len() + 1, &q, None));
    blocks.push(MULTICLASS_INSTRUCTION.to_string());
    blocks.join("\n\n")
}
