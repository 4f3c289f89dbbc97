use proptest::prelude::*;
use vdiff_core::guidance::{combine_guidance, GuidanceConfig};
use vdiff_core::lvsc::{lvsc_correct, LongVideoPlan};
use vdiff_core::schedule::{ddim_step, forward_diffuse, infer_reference_noise};
use vdiff_core::{Dims, NoiseSchedule, SeededRng};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reference_noise_inverts_forward_diffusion(seed in any::<u64>(), t in 0usize..1000) {
        let s = schedule();
        let mut rng = SeededRng::new(seed);
        let dims = Dims::new(1, 2, 3, 4, 5);
        let (z0, eps) = (rng.gaussian(dims), rng.gaussian(dims));
        let z_t = forward_diffuse(&z0, &eps, t, &s).unwrap();
        let back = infer_reference_noise(&z_t, &z0, t, &s).unwrap();
        prop_assert!(back.max_abs_diff(&eps) < 1e-4, "t={t}");
    }

    #[test]
    fn final_ddim_step_with_true_noise_recovers_the_clean_sample(seed in any::<u64>(), t in 0usize..600) {
        let s = schedule();
        let mut rng = SeededRng::new(seed);
        let dims = Dims::new(1, 3, 2, 4, 4);
        let (z0, eps) = (rng.gaussian(dims), rng.gaussian(dims));
        let z_t = forward_diffuse(&z0, &eps, t, &s).unwrap();
        let x0 = ddim_step(&z_t, &eps, t, None, &s).unwrap();
        prop_assert!(x0.max_abs_diff(&z0) < 1e-3, "t={t}");
    }

    #[test]
    fn unit_guidance_returns_the_full_prediction(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let dims = Dims::new(2, 1, 2, 3, 3);
        let (u, v, f) = (rng.gaussian(dims), rng.gaussian(dims), rng.gaussian(dims));
        let out = combine_guidance(&u, &v, &f, GuidanceConfig::new(1.0, 1.0).unwrap()).unwrap();
        prop_assert!(out.max_abs_diff(&f) < 1e-6);
    }

    #[test]
    fn long_video_plan_covers_each_frame_once(total in 1usize..80, f in 2usize..20, n_frac in 0.0f64..1.0) {
        let n = 1 + ((f - 1) as f64 * n_frac) as usize % (f - 1);
        let plan = LongVideoPlan::new(total, f, n).unwrap();
        let mut seen = vec![0usize; total];
        for seg in plan.segments() {
            prop_assert!(seg.span().len() <= f);
            if let Some(r) = &seg.references {
                prop_assert_eq!(r.len(), n);
                prop_assert_eq!(r.end, seg.new.start);
            }
            seg.new.clone().for_each(|k| seen[k] += 1);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(plan.boundaries().len(), plan.segments().len() - 1);
    }

    #[test]
    fn correction_vanishes_when_references_are_predicted_exactly(seed in any::<u64>(), n in 1usize..4, m in 1usize..4) {
        let mut rng = SeededRng::new(seed);
        let eps = rng.gaussian(Dims::new(1, 2, n + m, 4, 4));
        let refs = eps.slice_frames(0..n).unwrap();
        let corrected = lvsc_correct(&eps, &refs, n).unwrap();
        prop_assert_eq!(corrected, eps.slice_frames(n..n + m).unwrap());
    }
}
