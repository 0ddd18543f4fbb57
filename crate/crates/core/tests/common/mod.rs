#![allow(dead_code)]

use lamae_core::config::{GeneratorConfig, LabelSet, ModelConfig};
use lamae_core::data::sampling::{sample_views_frames, to_input};
use lamae_core::data::synth::generate_dataset;
use lamae_core::data::Study;
use lamae_core::model::StudyInput;
use lamae_core::rng::{RngStreams, Stream};
use lamae_tensor::Float;

pub fn desk_generator(studies: usize, label_set: LabelSet) -> GeneratorConfig {
    GeneratorConfig {
        studies,
        label_set,
        ..GeneratorConfig::default()
    }
}

pub fn studies(n: usize, seed: u64) -> Vec<Study> {
    generate_dataset(&desk_generator(n, LabelSet::Separable), seed).unwrap()
}

pub fn inputs<T: Float>(cfg: &ModelConfig, studies: &[Study], seed: u64) -> Vec<StudyInput<T>> {
    let streams = RngStreams::new(seed);
    studies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = streams.stream(Stream::Data, &[i as u64]);
            let idx = sample_views_frames(
                &s.view_lengths(),
                cfg.views_per_study,
                cfg.frames_per_view,
                cfg.frame_window,
                &mut rng,
            )
            .unwrap();
            to_input(s, &idx, cfg, None).unwrap()
        })
        .collect()
}
