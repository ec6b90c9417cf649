//! Template-grammar dialogues with a learnable relevance structure.
//!
//! Each conversation has one topic. Every turn mentions the topic word and
//! introduces a content word from that topic's pool; every reply also echoes
//! the content word of the turn before it.

use super::{Conversation, Corpus, Speaker, Turn};
use crate::rng::RngStream;

const TOPICS: [(&str, [&str; 5]); 20] = [
    ("music", ["guitar", "drums", "rhythm", "melody", "concert"]),
    ("movies", ["actor", "director", "plot", "cinema", "sequel"]),
    ("football", ["goal", "stadium", "coach", "league", "referee"]),
    ("cooking", ["recipe", "oven", "spice", "dough", "sauce"]),
    ("travel", ["airport", "passport", "beach", "hostel", "luggage"]),
    ("books", ["novel", "author", "chapter", "library", "poem"]),
    ("science", ["atom", "experiment", "theory", "lab", "energy"]),
    ("games", ["console", "level", "puzzle", "score", "controller"]),
    ("art", ["painting", "canvas", "museum", "sculpture", "color"]),
    ("history", ["empire", "war", "castle", "king", "ruins"]),
    ("weather", ["rain", "storm", "sunshine", "snow", "wind"]),
    ("coffee", ["espresso", "beans", "latte", "barista", "mug"]),
    ("dogs", ["puppy", "leash", "bark", "bone", "walk"]),
    ("space", ["planet", "rocket", "star", "orbit", "astronaut"]),
    ("ocean", ["wave", "whale", "coral", "tide", "sailor"]),
    ("trains", ["station", "track", "ticket", "engine", "platform"]),
    ("gardens", ["flower", "soil", "seed", "tomato", "shovel"]),
    ("poetry", ["rhyme", "verse", "stanza", "sonnet", "haiku"]),
    ("chess", ["bishop", "knight", "opening", "checkmate", "pawn"]),
    ("robots", ["sensor", "motor", "circuit", "battery", "arm"]),
];

const OPENERS: [&str; 3] = [
    "hey , do you like {topic} ? i love the {new} part .",
    "i was reading about {topic} and {new} today .",
    "what do you think about {topic} and {new} ?",
];

const REPLIES: [&str; 5] = [
    "yes , {topic} with {prev} is great , but {new} is better .",
    "i agree about {prev} . {topic} needs more {new} .",
    "{prev} ? for {topic} i prefer {new} .",
    "really ? {topic} and {prev} remind me of {new} .",
    "{prev} is fun . my favorite {topic} thing is {new} .",
];

fn fill(template: &str, topic: &str, prev: &str, new: &str) -> String {
    template
        .replace("{topic}", topic)
        .replace("{prev}", prev)
        .replace("{new}", new)
}

/// Topic word list used by the generator, exposed for audits.
pub fn toy_topics() -> impl Iterator<Item = &'static str> {
    TOPICS.iter().map(|(t, _)| *t)
}

/// Deterministic toy corpus of `n_conversations` dialogues with 4 to 8 turns.
pub fn make_toy_corpus(n_conversations: usize, grammar_seed: u64) -> Corpus {
    let root = RngStream::new(grammar_seed).split_named("toy_corpus");
    let conversations = (0..n_conversations)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let (topic, pool) = TOPICS[rng.below(TOPICS.len())];
            let n_turns = 4 + rng.below(5);
            let mut prev = pool[rng.below(pool.len())];
            let mut turns = Vec::with_capacity(n_turns);
            turns.push(Turn::new(
                Speaker::A,
                fill(OPENERS[rng.below(OPENERS.len())], topic, "", prev),
            ));
            let mut speaker = Speaker::B;
            for _ in 1..n_turns {
                // a different word from the same pool
                let mut new = pool[rng.below(pool.len())];
                while new == prev {
                    new = pool[rng.below(pool.len())];
                }
                let text = fill(REPLIES[rng.below(REPLIES.len())], topic, prev, new);
                turns.push(Turn::new(speaker, text));
                speaker = speaker.other();
                prev = new;
            }
            Conversation::new(format!("toy-{grammar_seed}-{i:05}"), turns)
        })
        .collect();
    Corpus {
        name: format!("toy-{grammar_seed}"),
        conversations,
    }
}

#[cfg(test)]
mod tests {
    use super::super::tokenize;
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic() {
        assert_eq!(make_toy_corpus(5, 1), make_toy_corpus(5, 1));
        assert_ne!(make_toy_corpus(5, 1), make_toy_corpus(5, 2));
    }

    #[test]
    fn grammar_guarantees() {
        let c = make_toy_corpus(300, 7);
        let mut words = HashSet::new();
        for conv in &c.conversations {
            conv.validate().unwrap();
            assert!((4..=8).contains(&conv.turns.len()));
            for t in &conv.turns {
                words.extend(tokenize(&t.text));
            }
        }
        assert!(words.len() <= 200, "{} words", words.len());
    }

    #[test]
    fn replies_echo_topic_and_previous_word() {
        let topics: HashSet<&str> = toy_topics().collect();
        let pools: Vec<HashSet<&str>> = TOPICS.iter().map(|(_, p)| p.iter().copied().collect()).collect();
        for conv in &make_toy_corpus(200, 3).conversations {
            let toks: Vec<Vec<String>> = conv.turns.iter().map(|t| tokenize(&t.text)).collect();
            let topic = toks[0]
                .iter()
                .find(|w| topics.contains(w.as_str()))
                .expect("opener names a topic")
                .clone();
            let pool = &pools[TOPICS.iter().position(|(t, _)| *t == topic).unwrap()];
            for (i, turn) in toks.iter().enumerate() {
                assert!(turn.contains(&topic), "turn {i} of {} misses topic", conv.id);
                if i > 0 {
                    let shared = toks[i - 1]
                        .iter()
                        .filter(|w| pool.contains(w.as_str()))
                        .any(|w| turn.contains(w));
                    assert!(shared, "turn {i} of {} echoes nothing", conv.id);
                }
            }
        }
    }
}
