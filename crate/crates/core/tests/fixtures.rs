//! Committed files written by an earlier build must keep loading unchanged.

use std::path::{Path, PathBuf};

use freqdiff::conditioning::AvailabilityMask;
use freqdiff::phantoms::{generate_dataset, read_dataset};
use freqdiff::trainer::{load_checkpoint, save_checkpoint, synthesize_batch, SynthesisRequest};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn dataset_fixture_matches_the_generator() {
    let stored = read_dataset(&fixture("tiny.fdd")).unwrap();
    let fresh = generate_dataset(6, 16, 11).unwrap();
    assert_eq!(stored.generator_seed, 11);
    assert_eq!(stored.samples.len(), fresh.samples.len());
    for (a, b) in stored.samples.iter().zip(&fresh.samples) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.tissue_map, b.tissue_map);
        for (x, y) in a.modalities.iter().zip(&b.modalities) {
            // Stored as f32.
            let worst = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-6, "sample {}: {worst}", a.seed);
        }
    }
}

#[test]
fn checkpoint_fixture_round_trips_byte_for_byte() {
    let path = fixture("tiny.ckpt");
    let state = load_checkpoint(&path).unwrap();
    assert_eq!(state.params.config.depth, 1);
    assert_eq!(state.params.config.base_width, 4);
    assert_eq!(state.pipeline.schedule.steps(), 10);
    assert!(state.finished());

    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.ckpt");
    save_checkpoint(&state, &copy).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
}

#[test]
fn checkpoint_fixture_synthesizes_in_range() {
    let state = load_checkpoint(&fixture("tiny.ckpt")).unwrap();
    let data = read_dataset(&fixture("tiny.fdd")).unwrap();
    let requests: Vec<SynthesisRequest> = AvailabilityMask::synthesis_tasks(4)
        .into_iter()
        .enumerate()
        .map(|(i, mask)| SynthesisRequest {
            sample: &data.samples[i % 6],
            mask,
            seed: i as u64,
        })
        .collect();
    let out = synthesize_batch(&state.params, &state.pipeline, &requests, &mut |_, _| {}).unwrap();
    for (req, images) in requests.iter().zip(&out) {
        assert_eq!(images.len(), req.mask.missing_count());
        for img in images {
            assert_eq!(img.dims(), (16, 16));
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
