use pyrexpose::imaging::{apply_relative_ev, fit_within, resize_bilinear, synthetic::scene, Image};
use pyrexpose::infer::{bgu_apply, bgu_fit, correct, correct_direct, Route, DEFAULT_MAX_DIM};
use pyrexpose::model::{Corrector, ModelConfig};
use pyrexpose::pyramid::ScaleVector;

fn model() -> Corrector<f32> {
    Corrector::new(ModelConfig::desk(), 3).unwrap()
}

#[test]
fn large_frame_goes_through_guided_path() {
    let m = model();
    let s = m.config().scale_defaults.clone();
    let img = apply_relative_ev(&scene(1536, 2048, 4), -1.0).unwrap();
    let c = correct(&img, &m, &s, DEFAULT_MAX_DIM).unwrap();
    assert_eq!(c.route, Route::Guided);
    assert_eq!(c.image.dims(), (1536, 2048));
    assert!(c.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(c.timings.network_ms > 0.0 && c.timings.bgu_ms > 0.0);
}

fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data().len() as f64
}

#[test]
fn grid_fitted_at_low_res_restores_exposure_at_full_res() {
    let target = scene(1536, 2048, 4);
    let dark = apply_relative_ev(&target, -1.0).unwrap();
    let (h, w) = fit_within(1536, 2048, DEFAULT_MAX_DIM);
    let grid = bgu_fit(&resize_bilinear(&dark, h, w).unwrap(), &resize_bilinear(&target, h, w).unwrap()).unwrap();
    let full = bgu_apply(&grid, &dark);
    let err = mean_abs_diff(&full, &target);
    assert!(err < 1e-3, "mean abs diff {err}");
    assert!(mean_abs_diff(&dark, &target) > 0.1);
}

#[test]
fn small_frame_stays_direct_and_matches() {
    let m = model();
    let s = ScaleVector::ones(4);
    let img = scene(100, 130, 9);
    let c = correct(&img, &m, &s, DEFAULT_MAX_DIM).unwrap();
    assert_eq!(c.route, Route::Direct);
    assert_eq!(c.image, correct_direct(&img, &m, &s).unwrap());
}
