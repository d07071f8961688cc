use super::*;
use crate::config::ProjectionMode;

fn small_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            tokens_per_frame: 8,
            vocab_size: 64,
            local_window: 64,
            chunk_size: 16,
            projection_mode: ProjectionMode::DiagnosticIdentity,
            eos_token: None,
            ..ModelConfig::default()
        },
        fps: 1.0,
        max_new_tokens: 3,
        ..RunConfig::default()
    }
}

fn spec_100() -> SyntheticTraceSpec {
    SyntheticTraceSpec {
        seed: 3,
        frames: 100,
        tokens_per_frame: 8,
        vocab_size: 64,
        pattern_len: 4,
        fps: 1.0,
        needles: vec![NeedleSpec {
            start: 40,
            end: 42,
            pattern: 0,
        }],
        questions: vec![QuestionSpec {
            admission_frame: 90,
            pattern: 0,
            relevant: None,
        }],
    }
}

#[test]
fn generated_trace_echoes_the_spec() {
    let trace = gen_trace(&spec_100()).unwrap();
    assert_eq!(trace.frames.len(), 100);
    assert_eq!(trace.questions.len(), 1);
    let q = &trace.questions[0];
    assert_eq!(q.relevant, vec![40, 41, 42]);
    assert_eq!(q.admission_frame, 90);
    assert_eq!(q.tokens, vec![1, 2, 3, 4]);
    let labelled: Vec<u64> = trace.frames.iter().filter(|f| !f.labels.is_empty()).map(|f| f.frame_index).collect();
    assert_eq!(labelled, vec![40, 41, 42]);
    assert_eq!(trace.frames[41].tokens, vec![1, 2, 3, 4, 1, 2, 3, 4]);
    for f in &trace.frames {
        let needle = (40..=42).contains(&f.frame_index);
        assert!(f.tokens.iter().all(|&t| if needle { t < 32 } else { (32..64).contains(&t) }));
    }
}

#[test]
fn generation_is_byte_identical() {
    let a = gen_trace(&spec_100()).unwrap().to_jsonl();
    let b = gen_trace(&spec_100()).unwrap().to_jsonl();
    assert_eq!(a, b);
    assert_eq!(Trace::parse(&a).unwrap(), gen_trace(&spec_100()).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec_100();
    s.needles.push(NeedleSpec {
        start: 42,
        end: 45,
        pattern: 1,
    });
    assert!(matches!(gen_trace(&s), Err(Error::Spec(_))));
    let mut s = spec_100();
    s.questions[0].relevant = Some(vec![95]);
    assert!(matches!(gen_trace(&s), Err(Error::Spec(_))));
    let mut s = spec_100();
    s.needles[0].pattern = 9; // tokens 37..40 reach the background half
    assert!(matches!(gen_trace(&s), Err(Error::Spec(_))));
    let mut s = spec_100();
    s.needles[0].end = 100;
    assert!(matches!(gen_trace(&s), Err(Error::Spec(_))));
}

#[test]
fn trace_parsing_errors() {
    assert!(matches!(Trace::parse("{\"frame_index\": 1, \"tokens\": [1]}"), Err(Error::Parse(_))));
    assert!(matches!(Trace::parse("{\"tokens\": \"x\"}"), Err(Error::Parse(_))));
    let t = Trace::parse("\n{\"frame_index\": 0, \"tokens\": [1, 2]}\n").unwrap();
    assert_eq!(t.frames[0].timestamp, None);
    assert_eq!(t.timestamp(0, 0.5), 0.0);
    assert_eq!(t.timestamp(3, 0.5), 6.0);
}

#[test]
fn uniform_expectation_matches_enumeration() {
    for total in [1u64, 7, 50, 123, 200] {
        for span in [1u64, 3, 5] {
            if span > total {
                continue;
            }
            for r in [1usize, 3, 8, 64] {
                let samples = retrieval::uniform_sample(total, r);
                let mut sum = 0.0;
                for a in 0..=total - span {
                    let needle: Vec<u64> = (a..a + span).collect();
                    sum += retrieval::recall(&samples, &needle).unwrap();
                }
                let enumerated = sum / (total - span + 1) as f64;
                let analytic = uniform_expected_recall(total, span, r).unwrap();
                assert!((enumerated - analytic).abs() < 1e-12, "T={total} s={span} r={r}");
            }
        }
    }
    assert!(uniform_expected_recall(3, 5, 1).is_err());
}

fn sweep(r: &[usize], b: &[usize], modes: &[RetrievalMode]) -> Sweep {
    Sweep {
        r: r.to_vec(),
        b: b.to_vec(),
        modes: modes.to_vec(),
    }
}

#[test]
fn recall_grows_with_r_and_blocks_follow_b() {
    let config = small_config();
    let trace = gen_trace(&spec_100()).unwrap();
    let encoded = encode_trace(&trace, &config, None).unwrap();
    let report = bench_encoded(
        &encoded,
        &trace,
        &config,
        &sweep(&[1, 2, 8, 16, 32, 64], &[1], &[RetrievalMode::External, RetrievalMode::Internal]),
    )
    .unwrap();
    for mode in [RetrievalMode::External, RetrievalMode::Internal] {
        let recalls: Vec<f64> = report
            .summary
            .iter()
            .filter(|s| s.mode == mode)
            .map(|s| s.mean_recall.unwrap())
            .collect();
        assert!(recalls.windows(2).all(|w| w[0] <= w[1]), "{mode}: {recalls:?}");
        assert_eq!(*recalls.last().unwrap(), 1.0);
    }
    let report = bench_encoded(&encoded, &trace, &config, &sweep(&[64], &[1, 2, 4, 8, 16], &[RetrievalMode::External])).unwrap();
    for row in &report.rows {
        assert_eq!(row.blocks, 64usize.div_ceil(row.b), "b={}", row.b);
    }
    let uniform = bench_encoded(&encoded, &trace, &config, &sweep(&[8], &[1], &[RetrievalMode::Uniform])).unwrap();
    let row = &uniform.rows[0];
    assert_eq!(row.retrieved[0], retrieval::uniform_sample(91, 8));
    assert_eq!(row.recall, Some(retrieval::recall(&row.retrieved[0], &[40, 41, 42]).unwrap()));
}

#[test]
fn reports_are_deterministic_and_recomputable() {
    let config = small_config();
    let trace = gen_trace(&spec_100()).unwrap();
    let s = sweep(&[2, 8], &[1, 4], &[RetrievalMode::Internal, RetrievalMode::Uniform, RetrievalMode::Oracle]);
    let a = run_bench(&trace, &config, &s).unwrap();
    crate::par::set_enabled(false);
    let b = run_bench(&trace, &config, &s).unwrap();
    crate::par::set_enabled(true);
    assert_eq!(a.without_timings(), b.without_timings());
    assert_eq!(a.summary, BenchReport::summarize(&a.rows, &s));
    for row in &a.rows {
        let want = retrieval::mean_recall(
            &row.retrieved
                .iter()
                .map(|f| retrieval::RetrievalResult::unscored(f.clone(), 0, 1))
                .collect::<Vec<_>>(),
            &trace.questions[0].relevant,
        )
        .unwrap();
        assert_eq!(row.recall, Some(want));
        if row.mode == RetrievalMode::Oracle {
            assert_eq!(row.recall, Some(1.0));
        }
    }
    let lines = a.to_jsonl();
    assert_eq!(lines.lines().count(), a.rows.len() + a.summary.len() + 1);
    assert!(a.summary_table().contains("recall"));
    assert!(run_bench(&trace, &config, &sweep(&[2], &[0], &[RetrievalMode::Internal])).is_err());
}

fn desk_trace(frames: u64) -> (Trace, RunConfig) {
    let config = RunConfig::default();
    let spec = SyntheticTraceSpec::single_needle(&config.model, 1, frames, config.fps);
    (gen_trace(&spec).unwrap(), config)
}

#[test]
fn desk_verification_passes() {
    let (trace, config) = desk_trace(20);
    let report = verify_oracle(&trace, &config, &VerifyOptions::default()).unwrap();
    assert!(report.passed(), "{}", report.summary_table());
    assert_eq!(report.checks.len(), 4);
    let dev = report.checks[0].max_deviation.unwrap();
    assert!(dev < 1e-5);
}

#[test]
fn corrupted_store_is_reported_by_frame() {
    let (trace, config) = desk_trace(6);
    let report = verify_oracle(
        &trace,
        &config,
        &VerifyOptions {
            corrupt_frame: Some(4),
        },
    )
    .unwrap();
    assert!(!report.passed());
    let rt = report.checks.iter().find(|c| c.name == "store_round_trip").unwrap();
    assert!(!rt.passed);
    assert!(rt.detail.contains("frame 4"), "{}", rt.detail);
    assert!(report.checks.iter().filter(|c| c.name != "store_round_trip").all(|c| c.passed));
}

#[test]
fn empty_trace_passes_vacuously() {
    let report = verify_oracle(&Trace::default(), &RunConfig::default(), &VerifyOptions::default()).unwrap();
    assert!(report.passed());
    assert!(report.checks.is_empty());
}
