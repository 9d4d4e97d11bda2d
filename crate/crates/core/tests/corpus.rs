use proptest::prelude::*;
use xtqa::corpus::{build_vocab, tokenize, AnswerOption, Dataset, Lesson, Paragraph, Question, QuestionKind, Split, Vocab, UNK_ID};

fn lesson(sentences: Vec<String>) -> Lesson {
    Lesson {
        lesson_id: "L1".into(),
        title: "t".into(),
        paragraphs: vec![Paragraph {
            paragraph_id: "L1.p1".into(),
            sentences,
        }],
        questions: vec![Question {
            question_id: "q1".into(),
            kind: QuestionKind::TrueFalse,
            text: "is it".into(),
            options: vec![
                AnswerOption { label: "a".into(), text: "true".into() },
                AnswerOption { label: "b".into(), text: "false".into() },
            ],
            gold_label: "a".into(),
            diagram_id: None,
        }],
    }
}

proptest! {
    #[test]
    fn tokens_are_lowercase_alphanumeric(text in "\\PC{0,60}") {
        for t in tokenize(&text) {
            prop_assert!(!t.is_empty());
            prop_assert!(t.chars().all(char::is_alphanumeric));
            prop_assert_eq!(t.to_lowercase(), t.clone());
        }
    }

    #[test]
    fn vocab_ids_follow_frequency(words in prop::collection::vec("[a-e]{1,2}", 1..40), min_freq in 1usize..4) {
        let ds = Dataset::from_lessons(Split::Train, vec![lesson(vec![words.join(" ")])]).unwrap();
        let vocab = build_vocab(&ds, min_freq);
        let mut counts = std::collections::BTreeMap::new();
        for t in words.iter().chain(["is", "it", "true", "false"].iter().map(|s| *s).collect::<Vec<_>>().iter().map(|s| s.to_string()).collect::<Vec<_>>().iter()) {
            *counts.entry(t.clone()).or_insert(0usize) += 1;
        }
        let mut prev: Option<(usize, String)> = None;
        for id in 2..vocab.len() as u32 {
            let t = vocab.token(id).unwrap().to_string();
            let c = counts[&t];
            prop_assert!(c >= min_freq);
            if let Some((pc, pt)) = &prev {
                prop_assert!(*pc > c || (*pc == c && *pt < t));
            }
            prev = Some((c, t));
        }
        for (t, &c) in &counts {
            prop_assert_eq!(vocab.id(t) == UNK_ID, c < min_freq);
        }
        let back = Vocab::from_json(&vocab.to_json()).unwrap();
        prop_assert_eq!(back.hash(), vocab.hash());
    }
}
