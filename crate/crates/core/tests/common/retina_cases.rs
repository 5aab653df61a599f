//! Randomized retina cases shared by the property suite and the acceptance run.

use glimpse_core::retina::{build_layout, place, Offset, RetinaSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

/// Valid specs built inside out: every ring's cell size is a multiple of the
/// one inside it and divides the side it wraps.
pub fn spec_strategy() -> impl Strategy<Value = RetinaSpec> {
    (
        1usize..=2,
        0usize..=3,
        prop::collection::vec((1usize..=2, 1usize..=2), 0..=3),
    )
        .prop_filter_map("empty grid", |(center, blocks, rings)| {
            let mut side = center * blocks;
            let mut prev = center;
            let mut out = Vec::new();
            for (mult, t) in rings {
                let cell = if side % (prev * mult) == 0 { prev * mult } else { prev };
                out.push((cell, cell * t));
                side += 2 * cell * t;
                prev = cell;
            }
            out.reverse();
            (side > 0).then_some(RetinaSpec {
                grid_side: side,
                rings: out,
                center_cell: center,
            })
        })
}

pub fn case_strategy() -> impl Strategy<Value = (RetinaSpec, usize, usize, i32, i32)> {
    spec_strategy().prop_flat_map(|spec| {
        let g = spec.grid_side as i32;
        (Just(spec), 1usize..=24, 1usize..=24)
            .prop_flat_map(move |(s, r, c)| (Just(s), Just(r), Just(c), -g..=r as i32, -g..=c as i32))
    })
}

pub type Case = (RetinaSpec, usize, usize, i32, i32);

pub fn check_tiling(spec: &RetinaSpec) -> Result<(), TestCaseError> {
    let layout = build_layout(spec).unwrap();
    let g = spec.grid_side;
    let mut hits = vec![0u8; g * g];
    for cell in &layout.cells {
        for r in cell.row0..cell.row0 + cell.size {
            for c in cell.col0..cell.col0 + cell.size {
                hits[r * g + c] += 1;
            }
        }
    }
    prop_assert!(hits.iter().all(|&h| h == 1));
    Ok(())
}

pub fn check_masks((spec, rows, cols, dr, dc): &Case) -> Result<(), TestCaseError> {
    let (rows, cols, dr, dc) = (*rows, *cols, *dr, *dc);
    let layout = build_layout(spec).unwrap();
    let rt = place(&layout, rows, cols, Offset::new(dr, dc));
    let mask = rt.active_mask();
    prop_assert_eq!(mask.len(), layout.len());
    prop_assert_eq!(rt.active_count(), mask.iter().filter(|&&a| a).count());
    let mut row = 0;
    for (cell, &active) in layout.cells.iter().zip(mask) {
        let r0 = cell.row0 as i32 + dr;
        let c0 = cell.col0 as i32 + dc;
        let s = cell.size as i32;
        let inside = r0 >= 0 && c0 >= 0 && r0 + s <= rows as i32 && c0 + s <= cols as i32;
        prop_assert_eq!(inside, active);
        if active {
            prop_assert_eq!(rt.row_pixels(row).len(), cell.size * cell.size);
            prop_assert_eq!(rt.cell_size(row), cell.size);
            row += 1;
        }
    }
    let dense = rt.to_dense();
    for r in 0..dense.nrows() {
        prop_assert!((dense.row(r).sum() - 1.0).abs() < 1e-12);
        prop_assert!(dense.row(r).iter().all(|&v| v >= 0.0));
    }
    let covered = rt.coverage();
    for p in 0..rows * cols {
        prop_assert_eq!(covered[p], dense.column(p).iter().any(|&v| v > 0.0));
    }
    Ok(())
}

pub fn check_linearity((spec, rows, cols, dr, dc): &Case, a: f64, b: f64, seed: u64) -> Result<(), TestCaseError> {
    let (rows, cols, dr, dc) = (*rows, *cols, *dr, *dc);
    let layout = build_layout(spec).unwrap();
    let rt = place(&layout, rows, cols, Offset::new(dr, dc));
    let n = rows * cols;
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let x: Vec<f64> = (0..n).map(|_| next()).collect();
    let y: Vec<f64> = (0..n).map(|_| next()).collect();
    let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
    let lhs = rt.apply(&mix).unwrap();
    let rhs = rt.apply(&x).unwrap() * a + rt.apply(&y).unwrap() * b;
    prop_assert!((lhs - rhs).amax() < 1e-12);

    let dense = rt.to_dense();
    let xm = DMatrix::from_column_slice(n, 1, &x);
    prop_assert!((rt.apply_matrix(&xm).unwrap() - &dense * &xm).amax() < 1e-12);
    let k = rt.active_count();
    let g = DMatrix::from_fn(k, 2, |_, _| next());
    prop_assert!((rt.transpose_apply_matrix(&g).unwrap() - dense.transpose() * &g).amax() < 1e-12);

    // a constant image glimpses and upsamples to itself on the covered pixels
    let ones = vec![0.7; n];
    let up = rt.upsample(rt.apply(&ones).unwrap().as_slice()).unwrap();
    for p in 0..n {
        prop_assert_eq!(up.missing[p], !rt.coverage()[p]);
        if !up.missing[p] {
            prop_assert!((up.image[p] - 0.7).abs() < 1e-15);
        }
    }
    Ok(())
}
