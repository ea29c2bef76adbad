use super::lexicon::LEXICON;
use crate::lm::Vocabulary;
use crate::tasks::{TaskKind, Templates, NO_MASK_ANSWER};

/// Closed vocabulary covering every prompt and answer the generator can
/// produce: template words, category names and plurals, riddles and the
/// relation phrases.
pub fn standard_vocabulary() -> Vocabulary {
    let mut corpus: Vec<String> = Vec::new();
    let templates = Templates::builtin();
    for kind in TaskKind::ALL {
        for t in templates.prompts(kind) {
            corpus.push(t.replace("{category}", " ").replace("{description}", " "));
        }
    }
    for c in &LEXICON {
        corpus.push(c.name.to_string());
        corpus.push(c.plural.to_string());
        corpus.push(c.riddle.to_string());
    }
    corpus.extend(
        [
            "USER: <POINT> ASSISTANT: <SEG>, <SEG>.",
            "Categories: , .",
            NO_MASK_ANSWER,
            "the closest to the window wall on the left right largest all",
            ", it is the one closest to the window wall",
        ]
        .map(String::from),
    );
    Vocabulary::from_corpus(corpus.iter().map(String::as_str))
}
