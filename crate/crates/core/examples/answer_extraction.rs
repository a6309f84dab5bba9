//! Extracts structured answers from free-text completions and shows the
//! evidence behind each value.

use srct::design::{AnswerKind, ChatMessage, QuestionItem};
use srct::dispatch::{ChatRequest, Outcome, TranscriptRecord};
use srct::extraction::{extract_structured, filter_valid};

fn question(id: &str, kind: AnswerKind, label: &str) -> QuestionItem {
    QuestionItem {
        id: id.into(),
        prompt: String::new(),
        kind,
        scale_meaning: String::new(),
        labels: vec![label.into()],
    }
}

fn transcript(id: &str, text: &str) -> TranscriptRecord {
    TranscriptRecord {
        trial_id: id.into(),
        session_id: id.into(),
        provider_id: "example".into(),
        request: ChatRequest {
            model: "example".into(),
            messages: vec![ChatMessage::user("...")],
            temperature: 1.0,
            max_tokens: 256,
        },
        completion: text.into(),
        requested_at_ms: 0,
        responded_at_ms: 0,
        attempts: 1,
        outcome: Outcome::Ok,
        error: None,
    }
}

fn main() {
    let questions = [
        question(
            "negligent",
            AnswerKind::Binary {
                positive: "negligent".into(),
                negative: "not negligent".into(),
            },
            "verdict",
        ),
        question("confidence", AnswerKind::Scale { lo: 0, hi: 10 }, "confidence"),
    ];
    let completions = [
        "The railing cost about $40. Verdict: negligent. Confidence: 8",
        "I don't think the owner was negligent here. On a scale from 0 to 10, my confidence is seven.",
        "Confidence: 3/10. Actually, I'll revise that. Confidence: 6. Verdict: not negligent.",
        "I'm sorry, but I can't assess the liability of a real person.",
        "Confidence: 14. Verdict: negligent.",
    ];
    let mut responses = Vec::new();
    for (i, text) in completions.iter().enumerate() {
        let r = extract_structured(&transcript(&format!("t{i}"), text), &questions);
        println!("{text}\n  -> {:?} {:?}", r.validity, r.answers);
        for e in &r.evidence {
            println!("     {} = {} from {:?} at byte {}", e.question_id, e.value, e.token, e.offset);
        }
        responses.push(r);
    }
    let p = filter_valid(responses);
    println!("\n{} valid, {} rejected: {:?}", p.valid.len(), p.rejected.len(), p.tally);
}
