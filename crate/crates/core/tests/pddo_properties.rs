use std::f64::consts::PI;

use perilstm::field::{sample_field, Grid};
use perilstm::pddo::{
    apply_derivative, build_family, build_moment_matrix, solve_pd_coefficients, DerivativeFilterSet, Order,
};
use proptest::prelude::*;

/// Gauss-Jordan with full pivoting, written independently of the library LU.
fn gauss_jordan_oracle(a: [[f64; 6]; 6], b: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut m: Vec<Vec<f64>> = (0..6)
        .map(|r| a[r].iter().chain(b[r].iter()).copied().collect())
        .collect();
    let mut col_of: Vec<usize> = (0..6).collect();
    for k in 0..6 {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for r in k..6 {
            for c in k..6 {
                if m[r][c].abs() > best {
                    best = m[r][c].abs();
                    pr = r;
                    pc = c;
                }
            }
        }
        m.swap(k, pr);
        for row in m.iter_mut() {
            row.swap(k, pc);
        }
        col_of.swap(k, pc);
        let piv = m[k][k];
        for v in m[k].iter_mut() {
            *v /= piv;
        }
        for r in 0..6 {
            if r != k {
                let f = m[r][k];
                for c in 0..12 {
                    m[r][c] -= f * m[k][c];
                }
            }
        }
    }
    let mut x = [[0.0; 6]; 6];
    for k in 0..6 {
        for c in 0..6 {
            x[col_of[k]][c] = m[k][6 + c];
        }
    }
    x
}

#[test]
fn coefficients_match_independent_solver() {
    let fam = build_family(2, 1.0 / 128.0, 3.015).unwrap();
    let mm = build_moment_matrix(&fam);
    let lib = solve_pd_coefficients(&mm).unwrap();
    let oracle = gauss_jordan_oracle(mm.a, mm.b);
    for c in 0..6 {
        let scale = (0..6).map(|r| oracle[r][c].abs()).fold(0.0, f64::max);
        for r in 0..6 {
            assert!(
                (lib.a[r][c] - oracle[r][c]).abs() <= 1e-10 * scale,
                "a[{r}][{c}]: {} vs {}",
                lib.a[r][c],
                oracle[r][c]
            );
        }
    }
}

#[test]
fn orthogonality_identities_hold() {
    for m in 1..=3 {
        for dx in [1.0, 0.05, 1.0 / 128.0] {
            let f = DerivativeFilterSet::build(m, dx, m as f64 + 1.015).unwrap();
            let defect = f.orthogonality_defect();
            assert!(defect < 1e-9, "m={m} dx={dx} defect {defect}");
        }
    }
}

fn quadratic(c: &[f64; 6], x: f64, y: f64) -> f64 {
    c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * y * y + c[5] * x * y
}

fn exact_derivative(c: &[f64; 6], o: Order, x: f64, y: f64) -> f64 {
    match o {
        Order::D00 => quadratic(c, x, y),
        Order::D10 => c[1] + 2.0 * c[3] * x + c[5] * y,
        Order::D01 => c[2] + 2.0 * c[4] * y + c[5] * x,
        Order::D20 => 2.0 * c[3],
        Order::D02 => 2.0 * c[4],
        Order::D11 => c[5],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn quadratics_are_differentiated_exactly(
        c in proptest::array::uniform6(-1.0f64..1.0),
        x0 in -1.0f64..1.0,
        y0 in -1.0f64..1.0,
        m in 1usize..=3,
    ) {
        let dx = 1.0 / 64.0;
        let f = DerivativeFilterSet::build(m, dx, m as f64 + 1.015).unwrap();
        for o in Order::ALL {
            let got: f64 = f
                .offsets()
                .zip(f.kernel(o))
                .map(|((a, b), k)| quadratic(&c, x0 + a, y0 + b) * k)
                .sum();
            let want = exact_derivative(&c, o, x0, y0);
            prop_assert!((got - want).abs() < 1e-8, "{:?}: {} vs {}", o, got, want);
        }
    }
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn dx_error(n: usize) -> f64 {
    let g = Grid::new(n, 0.0, 1.0).unwrap();
    let f = DerivativeFilterSet::build(2, g.dx(), 3.015).unwrap();
    let s = sample_field(&g, |x, y| [(2.0 * PI * x).sin() * (2.0 * PI * y).sin()]).unwrap();
    let d = apply_derivative(&s, &f, Order::D10).unwrap();
    let e = sample_field(&g, |x, y| [2.0 * PI * (2.0 * PI * x).cos() * (2.0 * PI * y).sin()]).unwrap();
    rel_l2(d.data(), e.data())
}

#[test]
fn first_derivative_converges_under_refinement() {
    let errs: Vec<f64> = [32, 64, 128].into_iter().map(dx_error).collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!(errs[2] < 1e-2, "{errs:?}");
}

#[test]
fn small_horizon_approaches_three_point_laplacian_row() {
    let dx = 0.1;
    let f = DerivativeFilterSet::build(1, dx, 1.015).unwrap();
    let fdm = DerivativeFilterSet::central_difference(dx).unwrap();
    let (k, e) = (f.kernel(Order::D20), fdm.kernel(Order::D20));
    let scale = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in k.iter().zip(e) {
        assert!((a - b).abs() <= 0.1 * scale, "{k:?} vs {e:?}");
    }
}
