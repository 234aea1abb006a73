// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use mechprobe::error::Error;
use mechprobe::io::{self, TraceSet};
use mechprobe_core::taskgen::{generate, TaskConfig};
use mechprobe_core::toylm::{Model, ModelConfig, PruneMask};
use mechprobe_core::trace::{SimplifiedAttention, TraceKind};
use proptest::prelude::*;

fn tiny_model() -> Model<f32> {
    Model::init_random(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 40,
        max_seq_len: 12,
        seed: 5,
    })
    .unwrap()
}

#[test]
fn jsonl_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        TaskConfig::kth(6, 3, 32, 50, 1),
        TaskConfig::chain(4, 1, 32, 50, 2),
        TaskConfig::chain(3, 0, 32, 50, 3),
    ] {
        let ds = generate(&cfg, 0).unwrap();
        let p = dir.path().join("ds.jsonl");
        io::write_dataset(&p, &ds).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = io::read_dataset(&p).unwrap();
        assert_eq!(back, ds);
        io::write_dataset(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }
}

#[test]
fn jsonl_errors_name_the_line() {
    let ds = generate(&TaskConfig::kth(4, 1, 16, 3, 1), 0).unwrap();
    let mut buf = Vec::new();
    io::write_dataset_to(&ds, &mut buf).unwrap();
    let mut text = String::from_utf8(buf).unwrap();
    text.push_str("{\"id\": 9, \"bogus\": true}\n");
    let err = io::read_dataset_from(text.as_bytes(), Path::new("x.jsonl")).unwrap_err();
    assert!(matches!(err, Error::Line { line: 4, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model();
    let p = dir.path().join("m.ckpt");
    io::save_checkpoint(&model, &p).unwrap();
    let back = io::load_checkpoint(&p, None).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    let tokens = [1, 5, 9, 33, 2];
    let a = model.forward(&tokens, &PruneMask::none()).unwrap();
    let b = back.forward(&tokens, &PruneMask::none()).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(io::encode_checkpoint(&back), std::fs::read(&p).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let bytes = io::encode_checkpoint(&tiny_model());
    for cut in [4, 20, bytes.len() - 1] {
        let err = io::decode_checkpoint(&bytes[..cut], Path::new("m.ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(io::decode_checkpoint(&extra, Path::new("m.ckpt")).is_err());
}

#[test]
fn missing_inputs_map_to_missing() {
    let err = io::read_traces(Path::new("/nonexistent/t.mpt")).unwrap_err();
    assert!(matches!(err, Error::Missing { .. }));
    assert_eq!(err.exit_code(), 2);
}

fn trace_set() -> impl Strategy<Value = TraceSet> {
    (1usize..5, 1usize..4, any::<bool>(), 0usize..6).prop_flat_map(|(l, h, pooled, n)| {
        let (kind, heads) = if pooled {
            (TraceKind::HeadPooled, 1)
        } else {
            (TraceKind::LastToken, h)
        };
        let trace = (1usize..10, any::<u64>()).prop_flat_map(move |(w, id)| {
            prop::collection::vec(
                any::<f32>().prop_filter("finite", |v| v.is_finite()),
                l * heads * w,
            )
            .prop_map(move |v| {
                SimplifiedAttention::new(kind, l, heads, w, v)
                    .unwrap()
                    .with_example(id)
            })
        });
        prop::collection::vec(trace, n)
            .prop_map(move |traces| TraceSet::new(kind, l, heads, traces).unwrap())
    })
}

proptest! {
    #[test]
    fn trace_files_round_trip(set in trace_set()) {
        let bytes = io::encode_traces(&set).unwrap();
        let back = io::decode_traces(&bytes, Path::new("t.mpt")).unwrap();
        prop_assert_eq!(back.kind, set.kind);
        prop_assert_eq!((back.n_layers, back.n_heads), (set.n_layers, set.n_heads));
        prop_assert_eq!(back.traces.len(), set.traces.len());
        for (a, b) in back.traces.iter().zip(&set.traces) {
            prop_assert_eq!(&a.values, &b.values);
            prop_assert_eq!(a.width, b.width);
            prop_assert_eq!(a.provenance.example_id, b.provenance.example_id);
        }
        prop_assert_eq!(io::encode_traces(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_trace_files_are_rejected(set in trace_set(), frac in 0.0f64..1.0) {
        let bytes = io::encode_traces(&set).unwrap();
        let cut = (frac * bytes.len() as f64) as usize;
        prop_assume!(cut < bytes.len());
        prop_assert!(io::decode_traces(&bytes[..cut], Path::new("t.mpt")).is_err());
    }
}
