//! Scans the three weighted inequalities over a random analytic suite and
//! prints the smallest margin per `(lambda, s)` cell.

use corrupt_mfg::carleman::{ibp_identity, random_suite, scan_thresholds, DiagonalOperator, Quadrature, Theorem};

fn main() -> corrupt_mfg::Result<()> {
    let suite = random_suite(20, 2, 7);
    let q = Quadrature::default();
    let lambdas = [1.0, 2.0, 5.0, 10.0];
    let op = DiagonalOperator::constant(0.1, 0.1);
    let sigma = 0.2.into();
    let l0 = DiagonalOperator::from_volatilities(&sigma, &sigma);

    for (theorem, op, ss) in [
        (Theorem::T51, &op, vec![2.0, 3.0, 4.0]),
        (Theorem::T52, &op, vec![2.0, 3.0, 4.0, 6.0, 8.0]),
        (Theorem::T71, &l0, vec![2.0, 3.0, 4.0]),
    ] {
        let table = scan_thresholds(&suite, theorem, op, &lambdas, &ss, &q)?;
        println!("inequality {theorem}: threshold s = {:?}", table.threshold);
        for row in &table.rows {
            println!(
                "  lambda {:>4} s {:>3}  min relative margin {:>11.4e}  holds {}  quadrature trusted {}  min C {:?}",
                row.lambda, row.s, row.min_relative_margin, row.all_hold, row.all_valid, row.min_empirical_c
            );
        }
    }

    let mut worst = 0.0_f64;
    for v in &suite {
        let (lhs, rhs) = ibp_identity(v, &op, &q)?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    println!("integration-by-parts identity: worst relative gap {worst:.3e}");
    Ok(())
}
