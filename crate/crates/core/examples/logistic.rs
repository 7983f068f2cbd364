//! Euler-Maruyama run of the noise-free logistic sub-model against its
//! closed form `y(t) = y0 e^t / (1 - y0 + y0 e^t)` for `beta b = 1`.

use corrupt_mfg::agents::logistic_check;

fn main() {
    println!("{:>8} {:>12} {:>12} {:>10}", "dt", "y(1) sim", "y(1) exact", "error");
    for dt in [1e-2, 1e-3, 1e-4] {
        let (sim, exact) = logistic_check(0.5, 1.0, dt, 1.0);
        println!("{dt:>8.0e} {sim:>12.8} {exact:>12.8} {:>10.3e}", (sim - exact).abs());
    }
    let (late, _) = logistic_check(0.5, 1.0, 1e-4, 20.0);
    println!("y(20) = {late:.8}");
}
