#[test]
fn debug_eps_sweep() {
    for eps in [1e-6, 3e-6, 1e-5, 3e-5, 1e-4, 3e-4] {
        let r = pointalign::network::run_objective_gradcheck::<f64>(0, false, eps, 1e-4).unwrap();
        println!(
            "eps {eps:.0e}: max_abs {:.3e} max_rel {:.3e} worst {:?} checked {} skipped {}",
            r.max_abs_err, r.max_rel_err, r.worst_coord, r.checked, r.skipped.len()
        );
    }
}
