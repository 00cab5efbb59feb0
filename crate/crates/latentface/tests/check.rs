use latentface::check::{self, sign_flipped_shading_backward, CheckLine};
use latentface_core::gradcheck::analytic_render_backward;

fn failures(lines: &[CheckLine]) -> Vec<&str> {
    lines.iter().filter(|l| !l.pass).map(|l| l.name.as_str()).collect()
}

#[test]
fn analytic_render_gradients_pass() {
    let lines = check::render_gradients(&analytic_render_backward);
    assert!(failures(&lines).is_empty(), "{:?}", failures(&lines));
    for g in ["albedo", "depth", "pose", "light"] {
        assert!(lines.iter().any(|l| l.name.contains(g)), "no line for {g}");
    }
}

#[test]
fn sign_flipped_shading_gradient_is_caught() {
    let lines = check::render_gradients(&sign_flipped_shading_backward);
    let failed = failures(&lines);
    assert!(failed.iter().any(|n| n.contains("albedo")) && failed.iter().any(|n| n.contains("light")), "{failed:?}");
}

#[test]
fn network_gradients_pass_per_group() {
    let lines = check::network_gradients();
    assert!(lines.iter().any(|l| l.name.starts_with("grad stage1.")));
    assert!(lines.iter().any(|l| l.name.starts_with("grad stage2.")));
    assert!(failures(&lines).is_empty(), "{:?}", failures(&lines));
}

#[test]
fn invariant_suite_passes() {
    let lines = check::invariant_suite();
    assert!(failures(&lines).is_empty(), "{:?}", failures(&lines));
}

#[test]
fn report_lines_show_value_and_limit() {
    assert_eq!(CheckLine::below("x", 2e-4, 1e-3).to_string(), "PASS x: 2.000e-4 (< 1.000e-3)");
    assert_eq!(CheckLine::at_least("acc", 0.5, 0.7).to_string(), "FAIL acc: 0.5000 (>= 0.7000)");
    assert_eq!(CheckLine::exact("p", true).with_note("n").to_string(), "PASS p [n]");
}
