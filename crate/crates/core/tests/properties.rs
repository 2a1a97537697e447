mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use issuefix_core::bm25::{Bm25Index, Bm25Params};
use issuefix_core::dataset::{compute_statistics, RawInstance};
use issuefix_core::edit::{apply_edits, gold_patch_to_structured_edit, locate_snippet, parse_unified_patch, to_unified_patch};
use issuefix_core::inference::backend::{ScriptedBackend, ScriptedReply, Transcript};
use issuefix_core::inference::{run_with_resampling, Rejection, SamplingPolicy, Stage, Validated, ValidationError};
use issuefix_core::repo::{classify_test_file, number_lines, RepoSnapshot};
use issuefix_core::skeleton::{extract_skeleton, render_skeleton};
use issuefix_core::task::{
    build_retrieval_input, estimate_tokens, parse_editing_output, parse_retrieval_output, ContextBudget,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn numbering_round_trips(text in "[a-z \t\n:()=]{0,200}") {
        let numbered = number_lines(&text);
        prop_assert_eq!(numbered.to_content(), text.clone());
        let stripped: Vec<String> = numbered
            .render()
            .split('\n')
            .filter(|_| !numbered.lines.is_empty())
            .map(|l| l.split_once(' ').unwrap().1.to_string())
            .collect();
        let texts: Vec<String> = numbered.lines.iter().map(|l| l.text.clone()).collect();
        prop_assert_eq!(stripped, texts);
    }

    #[test]
    fn test_classification_is_pure(path in "[a-z_/]{1,30}\\.py") {
        prop_assert_eq!(classify_test_file(&path), classify_test_file(&path.clone()));
    }

    #[test]
    fn snapshot_order_ignores_input_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut files: Vec<(String, String)> = (0..r.random_range(1..10))
            .map(|i| (format!("d{}/f{i}.py", r.random_range(0..3)), format!("x = {i}\n")))
            .collect();
        let a = RepoSnapshot::from_files(files.clone()).unwrap();
        files.shuffle(&mut r);
        let b = RepoSnapshot::from_files(files).unwrap();
        prop_assert_eq!(a.paths().collect::<Vec<_>>(), b.paths().collect::<Vec<_>>());
        prop_assert_eq!(a.root_id(), b.root_id());
    }

    #[test]
    fn skeleton_is_deterministic_and_bounded(seed in any::<u64>()) {
        let module = common::random_module(&mut rng(seed), 0);
        let file = issuefix_core::repo::FileRecord::from_text("m.py", &module.source);
        let doc = extract_skeleton(&file);
        prop_assert_eq!(&extract_skeleton(&file), &doc);
        prop_assert_eq!(render_skeleton(&doc), doc.rendered.clone());
        for line in &module.interior {
            prop_assert!(!doc.rendered.contains(line.trim()));
        }
        prop_assert!(doc.rendered.len() <= 4 + module.source.len() + 8 * (doc.items.len() + 2));
    }

    #[test]
    fn bm25_matches_brute_force_and_is_non_negative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let corpus = common::random_corpus(&mut r, 20, 40);
        let texts: Vec<(String, String)> = corpus.iter().map(|(p, t)| (p.clone(), t.join(" "))).collect();
        let tokens: Vec<Vec<String>> = corpus.iter().map(|(_, t)| t.clone()).collect();
        let paths: Vec<String> = corpus.iter().map(|(p, _)| p.clone()).collect();
        let index = Bm25Index::build(&texts, Bm25Params::default()).unwrap();
        let query = common::random_query(&mut r);
        let oracle = common::brute_bm25(&tokens, &query, 1.2, 0.75);
        let all = index.score_all(&query);
        for (i, p) in paths.iter().enumerate() {
            let got = all[index.doc_id(p).unwrap()];
            prop_assert!(got >= 0.0);
            prop_assert!((got - oracle[i]).abs() < 1e-9);
        }
        let ranked: Vec<String> = index.top_k(&query.join(" "), 30).into_iter().map(|(p, _)| p).collect();
        let expected = common::brute_ranking(&paths, &oracle);
        prop_assert_eq!(&ranked[..], &expected[..expected.len().min(30)]);
    }

    #[test]
    fn bm25_ignores_document_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut texts: Vec<(String, String)> = common::random_corpus(&mut r, 20, 30)
            .into_iter()
            .map(|(p, t)| (p, t.join(" ")))
            .collect();
        let query = common::random_query(&mut r).join(" ");
        let a = Bm25Index::build(&texts, Bm25Params::default()).unwrap().top_k(&query, 30);
        texts.shuffle(&mut r);
        let b = Bm25Index::build(&texts, Bm25Params::default()).unwrap().top_k(&query, 30);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bm25_monotone_in_term_frequency(seed in any::<u64>()) {
        let mut r = rng(seed);
        let corpus = common::random_corpus(&mut r, 10, 30);
        let query = common::random_query(&mut r);
        let target = r.random_range(0..corpus.len());
        let slot = corpus[target].1.iter().position(|t| !query.contains(t));
        prop_assume!(slot.is_some());
        let build = |docs: &[(String, Vec<String>)]| {
            let texts: Vec<(String, String)> = docs.iter().map(|(p, t)| (p.clone(), t.join(" "))).collect();
            Bm25Index::build(&texts, Bm25Params::default()).unwrap()
        };
        let before = build(&corpus);
        let mut bumped = corpus.clone();
        // same length, one more occurrence of a query term
        bumped[target].1[slot.unwrap()] = query[0].clone();
        let after = build(&bumped);
        let path = &corpus[target].0;
        let s0 = before.score(&query, before.doc_id(path).unwrap()).unwrap();
        let s1 = after.score(&query, after.doc_id(path).unwrap()).unwrap();
        prop_assert!(s1 >= s0 - 1e-12, "{} < {}", s1, s0);
    }

    #[test]
    fn structured_edit_json_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (_, files) = common::random_snapshot(&mut r);
        let edit = common::random_edit(&mut r, &files);
        prop_assert_eq!(parse_editing_output(&edit.to_json()).unwrap(), edit.clone());
        prop_assert_eq!(parse_editing_output(&edit.to_json_pretty()).unwrap(), edit);
    }

    #[test]
    fn retrieval_tasks_respect_budget(seed in any::<u64>(), limit in 40usize..2000) {
        let mut r = rng(seed);
        let docs: Vec<_> = (0..r.random_range(0..20))
            .map(|i| {
                let m = common::random_module(&mut r, i);
                extract_skeleton(&issuefix_core::repo::FileRecord::from_text(&format!("m{i}.py"), &m.source))
            })
            .collect();
        let refs: Vec<_> = docs.iter().collect();
        let budget = ContextBudget::new(limit);
        if let Ok(task) = build_retrieval_input("widget crashes", Some("# readme"), &refs, &budget) {
            prop_assert!(estimate_tokens(&task.serialized()) <= limit);
            let again = build_retrieval_input("widget crashes", Some("# readme"), &refs, &budget).unwrap();
            prop_assert_eq!(again.serialized(), task.serialized());
        }
    }

    #[test]
    fn retrieval_output_has_no_duplicates(files in proptest::collection::vec("[a-c]\\.py", 1..8)) {
        let text = serde_json::json!({"files_to_edit": files}).to_string();
        let parsed = parse_retrieval_output(&text).unwrap();
        let mut unique = parsed.files.clone();
        unique.sort();
        unique.dedup();
        prop_assert_eq!(unique.len(), parsed.files.len());
    }

    #[test]
    fn round_trip_a(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (snapshot, files) = common::random_snapshot(&mut r);
        let edit = common::random_edit(&mut r, &files);
        let applied = apply_edits(&snapshot, &edit).unwrap();
        let patch = to_unified_patch(&snapshot, &applied.snapshot).render();
        let oracle = common::oracle_apply(&common::contents(&snapshot), &patch).unwrap();
        prop_assert_eq!(oracle, common::contents(&applied.snapshot));
    }

    #[test]
    fn round_trip_b(seed in any::<u64>()) {
        let mut r = rng(seed);
        let old = common::random_lines(&mut r, 1, 30);
        let new = common::mutate_lines(&mut r, &old);
        let (old_text, new_text) = (common::join_content(&old, true), common::join_content(&new, true));
        let snapshot = RepoSnapshot::from_files([("a.py", old_text.as_str())]).unwrap();
        let text = common::oracle_file_patch("a.py", &old_text, &new_text);
        let edit = gold_patch_to_structured_edit(&snapshot, &parse_unified_patch(&text).unwrap()).unwrap();
        let applied = apply_edits(&snapshot, &edit).unwrap();
        prop_assert_eq!(&applied.snapshot.get("a.py").unwrap().content, &new_text);
    }

    #[test]
    fn located_spans_match_snippets_and_other_lines_survive(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (snapshot, files) = common::random_snapshot(&mut r);
        let edit = common::random_edit(&mut r, &files);
        for block in &edit.edits {
            let span = locate_snippet(snapshot.get(&block.file).unwrap(), block).unwrap();
            let texts: Vec<String> = block.numbered_lines().unwrap().into_iter().map(|(_, t)| t).collect();
            prop_assert_eq!(span.text, texts);
        }
        let applied = apply_edits(&snapshot, &edit).unwrap();
        for (path, lines) in &files {
            let mut spans: Vec<_> = applied.spans.iter().filter(|s| &s.file == path).collect();
            spans.sort_by_key(|s| s.start_line);
            let new_lines = applied.snapshot.get(path).unwrap().lines().lines;
            let first = spans.first().map_or(lines.len(), |s| s.start_line - 1);
            prop_assert_eq!(&new_lines[..first], &lines[..first]);
            let tail = spans.last().map_or(0, |s| lines.len() - s.end_line);
            prop_assert_eq!(&new_lines[new_lines.len() - tail..], &lines[lines.len() - tail..]);
        }
    }

    #[test]
    fn resampling_temperatures_and_transport(seed in any::<u64>(), max_attempts in 1usize..8, first in 0.0f64..1.0) {
        let mut r = rng(seed);
        let policy = SamplingPolicy { first_temperature: first, retry_temperature: 0.7, max_attempts };
        let k = r.random_range(0..=max_attempts + 1);
        let mut replies: Vec<ScriptedReply> = (0..k).map(|_| "junk".into()).collect();
        replies.push(r#"{"files_to_edit": ["a.py"]}"#.into());
        let flaky: Vec<ScriptedReply> = replies
            .iter()
            .flat_map(|reply| {
                let n = r.random_range(0..=3);
                std::iter::repeat_n(ScriptedReply::TransportError { transport_error: "reset".into() }, n)
                    .chain([reply.clone()])
            })
            .collect();
        let task = build_retrieval_input("issue", None, &[], &ContextBudget::new(10_000)).unwrap();
        let validator = |raw: &str| -> Result<Validated<()>, ValidationError> {
            parse_retrieval_output(raw)
                .map(|_| Validated { value: (), warnings: vec![] })
                .map_err(|e| ValidationError::Rejected(Rejection::new(Stage::Parse, e.to_string())))
        };
        let steady = ScriptedBackend::sequence(replies);
        let a = run_with_resampling(&steady, &task, &policy, 3, &mut Transcript::default(), validator).unwrap();
        let shaky = ScriptedBackend::sequence(flaky);
        let b = run_with_resampling(&shaky, &task, &policy, 3, &mut Transcript::default(), validator).unwrap();
        let temps: Vec<f64> = a.attempts.iter().map(|x| x.temperature).collect();
        let want: Vec<f64> = (0..(k + 1).min(max_attempts)).map(|i| if i == 0 { first } else { 0.7 }).collect();
        prop_assert_eq!(temps, want);
        prop_assert_eq!(steady.calls(), a.attempts.len());
        prop_assert_eq!(a.attempts, b.attempts);
        prop_assert_eq!(a.result.is_ok(), b.result.is_ok());
    }

    #[test]
    fn statistics_ignore_instance_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut raws: Vec<RawInstance> = (0..r.random_range(1..12))
            .map(|i| {
                let old = common::random_lines(&mut r, 1, 20);
                let new = common::mutate_lines(&mut r, &old);
                let path = if r.random_bool(0.2) { format!("tests/test_{i}.py") } else { format!("m{i}.py") };
                let patch = if r.random_bool(0.1) {
                    "garbage".to_string()
                } else {
                    common::oracle_file_patch(&path, &common::join_content(&old, true), &common::join_content(&new, true))
                };
                RawInstance {
                    instance_id: format!("i{i}"),
                    repo_id: "r".into(),
                    issue_text: "x".into(),
                    base_snapshot_ref: "s".into(),
                    gold_patch_text: patch,
                    candidate_test_commands: None,
                }
            })
            .collect();
        let a = compute_statistics(&raws);
        raws.shuffle(&mut r);
        prop_assert_eq!(compute_statistics(&raws), a);
    }
}
