//! Checks every differentiable building block against central finite
//! differences and prints the worst relative error per group.
//!
//! cargo run --release --example gradient_check -- [step] [tolerance]

use std::time::Instant;

use mgt::checks::gradient_suite;

fn main() -> mgt::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().expect("numeric argument"));
    let step = args.next().unwrap_or(1e-5);
    let tolerance = args.next().unwrap_or(1e-4);
    let started = Instant::now();
    let groups = gradient_suite(step, tolerance)?;
    for g in &groups {
        let r = &g.report;
        let checked: usize = r.params.iter().map(|p| p.checked).sum();
        println!(
            "{:<18} {:>5} elements  max rel error {:.2e}  {}",
            g.group,
            checked,
            r.max_error(),
            if r.passed() { "ok" } else { "FAIL" }
        );
        for p in r.failures() {
            println!("    {} [{}]: analytic {:e} numeric {:e}", p.name, p.worst_index, p.analytic, p.numeric);
        }
    }
    println!("{:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
