use num_rational::Ratio;
use num_traits::{One, Zero};
use proptest::prelude::*;
use razewright::corpus::Chunk;
use razewright::dataset::{self, GenerationConfig};
use razewright::exam::{self, Question, VotingConfig};
use razewright::lora::{LowRankAdapter, Matrix};
use razewright::providers::{ChatRequest, FnChat, ProviderError};

fn chunks(n: usize) -> Vec<Chunk> {
    (0..n)
        .map(|i| {
            let text = format!("Section {i}: remove bracing bay {i} before lowering girder {}.", i * 7);
            Chunk {
                doc_id: "scheme.md".into(),
                seq: i,
                char_end: text.chars().count(),
                text,
                char_start: 0,
            }
        })
        .collect()
}

/// Reply depends only on the prompt, so any worker schedule must agree.
fn echo_entry(req: &ChatRequest) -> Result<String, ProviderError> {
    let prompt = &req.messages[0].content;
    let section = prompt.split("Section ").nth(1).and_then(|s| s.split(':').next()).unwrap_or("?");
    if section.parse::<usize>().is_ok_and(|n| n % 5 == 3) {
        return Ok("I cannot produce JSON for this one.".into());
    }
    Ok(format!(
        "Sure:\n{{\"instruction\": \"What is removed in section {section}?\", \"input\": \"\", \"output\": \"The bracing bay {section}.\"}}"
    ))
}

#[test]
fn generation_is_independent_of_worker_count() {
    let llm = FnChat(echo_entry);
    let input = chunks(23);
    let run = |workers| {
        let g = dataset::generate_entries(&input, &llm, &GenerationConfig { workers, per_chunk: 2, ..Default::default() })
            .unwrap();
        assert!(g.aborted.is_none());
        let entries: Vec<String> = g.entries.iter().map(|e| e.to_json()).collect();
        let rejects: Vec<(String, String)> = g.rejects.into_iter().map(|r| (r.chunk_id, r.raw_reply)).collect();
        (entries, rejects)
    };
    let serial = run(1);
    assert_eq!(serial.0.len(), 2 * 19);
    assert_eq!(serial.1.len(), 2 * 4);
    for workers in [2, 4, 7] {
        assert_eq!(run(workers), serial, "workers={workers}");
    }
}

fn bank() -> Vec<Question> {
    let mut bank = Vec::new();
    for i in 0..9 {
        bank.push(Question::choice(
            &format!("c{i}"),
            &format!("Which step comes first in sequence {i}?"),
            &[("A", "Unload the truss"), ("B", "Cut the chord"), ("C", "Remove the crane")],
            ["A", "B", "C"][i % 3],
        ));
        bank.push(Question::judgment(&format!("j{i}"), &format!("Statement {i} about temporary supports."), i % 2 == 0));
    }
    bank
}

/// Answers differ between questions but are a pure function of the prompt.
fn pure_answerer(req: &ChatRequest) -> Result<String, ProviderError> {
    let p = &req.messages[0].content;
    let digit = p.chars().filter(char::is_ascii_digit).map(|c| c as u32 - '0' as u32).sum::<u32>();
    Ok(if p.contains("Unload the truss") {
        format!("Answer: {}", ["A", "B", "C"][(digit % 3) as usize])
    } else if digit % 2 == 0 {
        "True".into()
    } else {
        "False".into()
    })
}

#[test]
fn exam_reports_are_reproducible_across_workers() {
    let llm = FnChat(pure_answerer);
    let bank = bank();
    let run = |workers| {
        let cfg = VotingConfig { workers, ..Default::default() };
        serde_json::to_string(&exam::run_exam(&bank, &llm, None, &cfg).unwrap()).unwrap()
    };
    let serial = run(1);
    assert_eq!(run(1), serial);
    assert_eq!(run(4), serial);
}

/// Rank by fraction-exact Gaussian elimination.
fn exact_rank(rows: Vec<Vec<Ratio<i128>>>) -> usize {
    let mut m = rows;
    let cols = m.first().map_or(0, Vec::len);
    let mut rank = 0;
    for col in 0..cols {
        let Some(pivot) = (rank..m.len()).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(rank, pivot);
        let inv = Ratio::one() / m[rank][col];
        for r in 0..m.len() {
            if r != rank && !m[r][col].is_zero() {
                let f = m[r][col] * inv;
                for c in 0..cols {
                    let delta = f * m[rank][c];
                    m[r][c] -= delta;
                }
            }
        }
        rank += 1;
    }
    rank
}

fn small_int_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<i8>>> {
    prop::collection::vec(prop::collection::vec(-4i8..=4, cols), rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn merged_update_has_rank_at_most_r(
        (d_out, d_in, r, down, up) in (1usize..7, 1usize..7)
            .prop_flat_map(|(o, i)| (Just(o), Just(i), 1..=o.min(i)))
            .prop_flat_map(|(o, i, r)| (Just(o), Just(i), Just(r), small_int_matrix(r, i), small_int_matrix(o, r)))
    ) {
        let to_f64 = |m: &[Vec<i8>]| -> Vec<Vec<f64>> {
            m.iter().map(|row| row.iter().map(|&x| f64::from(x)).collect()).collect()
        };
        let base = Matrix::from_fn(d_out, d_in, |i, j| (i * 3 + j) as f64);
        let adapter = LowRankAdapter::from_parts(
            base.clone(),
            Matrix::from_rows(&to_f64(&down)).unwrap(),
            Matrix::from_rows(&to_f64(&up)).unwrap(),
        ).unwrap();
        let merged = adapter.merge();
        // Small integers keep every product exact in f64, so the difference is the true delta.
        let delta: Vec<Vec<Ratio<i128>>> = (0..d_out)
            .map(|i| (0..d_in).map(|j| {
                let v = merged.get(i, j) - base.get(i, j);
                prop_assert_eq!(v.fract(), 0.0);
                Ok(Ratio::from_integer(v as i128))
            }).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        prop_assert!(exact_rank(delta) <= r);
    }
}
