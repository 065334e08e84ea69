use std::collections::BTreeMap;

use pricon::data::{
    build_windows, generate_synthetic_corpus, window_count, CorpusStyle, GeneratorConfig, PreprocessConfig,
    ThresholdMode, WindowLabel,
};
use pricon::models::{build_fusion_teacher, build_student, FusionTeacherArch, Sample, StudentArch};
use pricon::{Mode, RngStream, Tensor};
use proptest::prelude::*;

fn corpus_config(style: CorpusStyle, participants: usize, duration_s: f64) -> GeneratorConfig {
    let mut g = GeneratorConfig::desk(style);
    g.participants = participants;
    g.duration_s = duration_s;
    g.image_size = 8;
    g.n_features = 3;
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn windows_respect_session_bounds_and_thresholds(
        seed in 0u64..1000,
        again in any::<bool>(),
        participants in 2usize..5,
        duration_fifths in 20u32..60,
        len_steps in 1u32..6,
    ) {
        let style = if again { CorpusStyle::AgainLike } else { CorpusStyle::RecolaLike };
        let duration_s = duration_fifths as f64 / 5.0;
        let g = corpus_config(style, participants, duration_s);
        let corpus = generate_synthetic_corpus(&g, &RngStream::new(seed)).unwrap();
        let cfg = PreprocessConfig::for_style(style, len_steps as f64 * 0.4);
        let out = build_windows(&corpus, &cfg).unwrap();

        // the reaction shift shortens every session
        let usable = duration_s - cfg.shift_s;
        let expected = window_count(usable, cfg.step_s, cfg.len_s);
        let mut per_participant: BTreeMap<&str, usize> = BTreeMap::new();
        let frames = (cfg.len_s * g.fps).round() as usize;
        for w in &out.windows {
            *per_participant.entry(&w.participant_id).or_default() += 1;
            prop_assert!(w.start_s >= 0.0 && w.start_s + cfg.len_s <= usable + 1e-9);
            prop_assert_eq!(w.frames.shape(), &[frames, g.image_size, g.image_size][..]);
            prop_assert_eq!(w.features.len(), g.n_features);
            let th = out.thresholds[&w.participant_id];
            match w.label {
                WindowLabel::High => prop_assert!(w.score > th + cfg.binarise.epsilon),
                WindowLabel::Low => prop_assert!(w.score < th - cfg.binarise.epsilon),
                WindowLabel::Excluded => prop_assert!(false, "excluded window kept"),
            }
        }
        prop_assert!(per_participant.values().all(|&n| n <= expected));
        prop_assert_eq!(out.windows.len() + out.excluded, expected * participants);
        if cfg.binarise.mode == ThresholdMode::GlobalMedian {
            let first = out.thresholds.values().next().unwrap();
            prop_assert!(out.thresholds.values().all(|t| t == first));
        }
    }

    #[test]
    fn models_emit_distributions_and_eval_is_deterministic(
        seed in 0u64..1000,
        channels in 1usize..4,
        side in 8usize..14,
        embed in 2usize..8,
        batch in 1usize..4,
    ) {
        let mut rng = RngStream::new(seed);
        let frame = StudentArch::new(channels, side, side, embed);
        let mut student = build_student(frame.clone(), &mut rng).unwrap();
        let teacher = build_fusion_teacher(FusionTeacherArch::new(frame.clone(), 3), &mut rng).unwrap();
        let mut noise = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
        };
        let frames: Vec<_> = (0..batch).map(|_| noise(&[channels, side, side])).collect();
        let feats: Vec<_> = (0..batch).map(|_| noise(&[3])).collect();
        let s_batch: Vec<_> = frames.iter().map(Sample::frames).collect();
        let t_batch: Vec<_> = frames.iter().zip(&feats).map(|(f, x)| Sample::both(f, x)).collect();

        for out in [student.infer(&s_batch).unwrap(), teacher.infer(&t_batch).unwrap()] {
            prop_assert_eq!(out.probs.shape(), &[batch, 2][..]);
            for row in out.probs.data().chunks(2) {
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
                prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            }
        }
        let emb = student.infer(&s_batch).unwrap().embeddings;
        prop_assert_eq!(emb.shape(), &[batch, embed][..]);

        // eval mode ignores dropout, whatever the stream
        let a = student.predict(&s_batch, Mode::Eval, &mut RngStream::new(1)).unwrap();
        let b = student.forward(&s_batch, Mode::Eval, &mut RngStream::new(2)).unwrap();
        prop_assert_eq!(a.probs.data(), b.probs.data());
    }

    #[test]
    fn inputs_below_eight_pixels_are_rejected(side in 1usize..8, seed in 0u64..100) {
        let arch = StudentArch::new(1, side, 8, 4);
        prop_assert!(build_student(arch, &mut RngStream::new(seed)).is_err());
    }
}
