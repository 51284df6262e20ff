//! Templated mission language: "go to the <color> <kind>".
//!
//! The vocabulary is fixed and tiny; encoding is a table lookup producing
//! exactly [`MISSION_LEN`] token ids, and decoding is its inverse on the
//! mission grammar.

use super::{Color, EnvError, ObjectKind};

pub const MISSION_LEN: usize = 5;

/// Word order fixes token ids: templates words, then colors, then kinds.
pub const VOCAB: [&str; 12] = [
    "go", "to", "the", "red", "green", "blue", "purple", "yellow", "grey", "ball", "key", "box",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

fn word_id(word: &str) -> Result<u8, EnvError> {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .map(|i| i as u8)
        .ok_or_else(|| EnvError::UnknownWord(word.to_string()))
}

pub fn mission_text(color: Color, kind: ObjectKind) -> String {
    format!("go to the {} {}", color.word(), kind.word())
}

/// Tokenize a mission sentence. Errors on words outside the vocabulary or
/// sentences that are not exactly five words.
pub fn encode_mission(text: &str) -> Result<[u8; MISSION_LEN], EnvError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() != MISSION_LEN {
        return Err(EnvError::BadMission(format!(
            "expected {} words, got {}",
            MISSION_LEN,
            words.len()
        )));
    }
    let mut ids = [0u8; MISSION_LEN];
    for (slot, word) in ids.iter_mut().zip(&words) {
        *slot = word_id(word)?;
    }
    Ok(ids)
}

pub fn decode_mission(ids: &[u8]) -> Result<String, EnvError> {
    let words: Result<Vec<&str>, EnvError> = ids
        .iter()
        .map(|&id| {
            VOCAB
                .get(id as usize)
                .copied()
                .ok_or_else(|| EnvError::BadMission(format!("token id {id} out of range")))
        })
        .collect();
    Ok(words?.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_ball_encodes_to_table_ids() {
        let ids = encode_mission("go to the red ball").unwrap();
        assert_eq!(ids, [0, 1, 2, 3, 9]);
    }

    #[test]
    fn round_trip_over_all_grammar_missions() {
        for color in Color::ALL {
            for kind in ObjectKind::ALL {
                let text = mission_text(color, kind);
                let ids = encode_mission(&text).unwrap();
                assert_eq!(decode_mission(&ids).unwrap(), text);
            }
        }
    }

    #[test]
    fn unknown_word_is_an_error() {
        match encode_mission("go to the crimson ball") {
            Err(EnvError::UnknownWord(w)) => assert_eq!(w, "crimson"),
            other => panic!("expected unknown-word error, got {:?}", other),
        }
    }
}
