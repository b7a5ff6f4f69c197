use slatlab::data::{gen_toy, load_idx, ToySpec};
use slatlab::metrics::{accuracy, MetricRecord};
use slatlab::models::{build_toy_mlp, Activation};
use slatlab::training::{method_gradients, train, Method, TrainSpec};
use slatlab::SlatError;

fn toy_spec(method: Method) -> TrainSpec {
    TrainSpec { method, epochs: 8, batch: 50, epsilon: 0.1, eta: [(0, 0.1), (1, 0.1)].into(), ..Default::default() }
}

#[test]
fn every_method_learns_the_toy_task() {
    let ds = gen_toy(&ToySpec { n_per_class: 100, ..Default::default() }).unwrap();
    let (x, y) = ds.all();
    for method in Method::ALL {
        let act = if method == Method::SlatFastGa { Activation::Softplus } else { Activation::Relu };
        let mut model = build_toy_mlp(16, act, 1).unwrap();
        let spec = TrainSpec { lambda_ga: 0.2, ..toy_spec(method) };
        let report = train(&mut model, &ds, &spec, None, &mut Vec::<MetricRecord>::new()).unwrap();
        assert_eq!(report.steps, 8 * 4);
        let acc = accuracy(&model, &x, &y).unwrap();
        assert!(acc > 0.8, "{method}: accuracy {acc}");
    }
}

#[test]
fn fast_ga_without_penalty_is_slat() {
    let ds = gen_toy(&ToySpec { n_per_class: 16, ..Default::default() }).unwrap();
    let (x, y) = ds.all();
    let model = build_toy_mlp(8, Activation::Softplus, 2).unwrap();
    let (l_slat, g_slat) = method_gradients(&model, &x, &y, &toy_spec(Method::Slat), 0).unwrap();
    let (l_ga, g_ga) = method_gradients(&model, &x, &y, &toy_spec(Method::SlatFastGa), 0).unwrap();
    assert_eq!(l_slat, l_ga);
    assert_eq!(g_slat, g_ga);

    // A positive weight changes the update but never lowers the reported loss.
    let spec = TrainSpec { lambda_ga: 0.5, ..toy_spec(Method::SlatFastGa) };
    let (l_pen, g_pen) = method_gradients(&model, &x, &y, &spec, 0).unwrap();
    assert!(l_pen >= l_slat - 1e-12);
    assert_ne!(g_pen, g_slat);
}

#[test]
fn latent_rs_without_latent_sites_is_fgsm_rs() {
    let ds = gen_toy(&ToySpec { n_per_class: 16, ..Default::default() }).unwrap();
    let (x, y) = ds.all();
    let mut model = build_toy_mlp(8, Activation::Relu, 3).unwrap();
    model.set_sites([0], 0.1).unwrap();
    let spec = |m| TrainSpec { eta: [(0, 0.1)].into(), ..toy_spec(m) };
    let a = method_gradients(&model, &x, &y, &spec(Method::FgsmRsLatent), 7).unwrap();
    let b = method_gradients(&model, &x, &y, &spec(Method::FgsmRs), 7).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eta_on_unknown_site_is_rejected() {
    let ds = gen_toy(&ToySpec { n_per_class: 8, ..Default::default() }).unwrap();
    let mut model = build_toy_mlp(8, Activation::Relu, 0).unwrap();
    let spec = TrainSpec { eta: [(0, 0.1), (5, 0.1)].into(), ..toy_spec(Method::Slat) };
    let err = train(&mut model, &ds, &spec, None, &mut Vec::<MetricRecord>::new()).unwrap_err();
    assert!(matches!(err, SlatError::UnknownSite(5)), "{err}");
}

#[test]
fn idx_errors_are_typed() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("img");
    let lbl = tmp.path().join("lbl");
    std::fs::write(&img, [0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3]).unwrap();
    std::fs::write(&lbl, [0u8, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
    assert!(matches!(load_idx(&img, &lbl), Err(SlatError::TruncatedFile { .. })));
    assert!(load_idx(tmp.path().join("missing"), &lbl).is_err());
}
