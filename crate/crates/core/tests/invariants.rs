//! Properties of the public API that should hold for any grid or box.

use proptest::prelude::*;
use zoomwarp::{
    apply_offsets, build_inverse_index, forward_box_transform, iou_lower_bound, make_uniform_grid, roundtrip,
    upsample_offsets, warp_image, zoom_loss, BBox, GridDims, Image, NormCoord, OffsetField, SamplingGrid,
    ScalarField, Space, ZoomLossConfig,
};

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.02..0.2f64, 0.02..0.2f64)
        .prop_map(|(x, y, w, h)| BBox::from_coords(x, y, x + w, y + h, Space::Original).unwrap())
}

fn smooth_grid(side: usize, ax: f64, ay: f64, phase: f64) -> SamplingGrid {
    let dims = GridDims::new(side, side).unwrap();
    let low = dims.downscaled(8);
    let dx = ScalarField::from_fn(low, |i, j| ax * ((i as f64 * 0.7 + phase).sin() * (j as f64 * 0.5).cos()));
    let dy = ScalarField::from_fn(low, |i, j| ay * ((j as f64 * 0.6 - phase).sin() * (i as f64 * 0.4).cos()));
    let off = upsample_offsets(&OffsetField::new(dx, dy).unwrap(), dims);
    apply_offsets(&make_uniform_grid(dims), &off, true).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_roundtrip_moves_corners_at_most_half_a_cell(b in arb_box(), side in 16usize..96) {
        let grid = make_uniform_grid(GridDims::new(side, side).unwrap());
        let rt = roundtrip(&b, &grid, &build_inverse_index(&grid));
        let half_diag = 0.5 * grid.dims().spacing_x().hypot(grid.dims().spacing_y());
        prop_assert!(rt.tau <= half_diag + 1e-12);
    }

    #[test]
    fn translated_box_respects_iou_bound(b in arb_box(), tau in 0.0..0.02f64, theta in 0.0..std::f64::consts::TAU) {
        let (dx, dy) = (tau * theta.cos(), tau * theta.sin());
        let moved = BBox::from_coords(
            b.c1().x + dx,
            b.c1().y + dy,
            b.c2().x + dx,
            b.c2().y + dy,
            Space::Original,
        );
        prop_assume!(moved.is_ok());
        let bound = iou_lower_bound(b.width(), b.height(), tau);
        let iou = b.iou(&moved.unwrap());
        prop_assert!(iou + 1e-12 >= bound.exact, "iou {} < bound {}", iou, bound.exact);
    }

    #[test]
    fn forward_boxes_stay_in_unit_square(
        b in arb_box(),
        ax in -0.05..0.05f64,
        ay in -0.05..0.05f64,
        phase in 0.0..6.0f64,
    ) {
        let grid = smooth_grid(64, ax, ay, phase);
        let fb = forward_box_transform(&b, &build_inverse_index(&grid)).bbox;
        prop_assert_eq!(fb.space(), Space::Zoomed);
        prop_assert!(fb.c1().x >= 0.0 && fb.c1().y >= 0.0 && fb.c2().x <= 1.0 && fb.c2().y <= 1.0);
        prop_assert!(fb.width() > 0.0 && fb.height() > 0.0);
    }

    #[test]
    fn inverse_index_agrees_with_brute_force(
        ax in -0.08..0.08f64,
        ay in -0.08..0.08f64,
        phase in 0.0..6.0f64,
        qx in -0.1..1.1f64,
        qy in -0.1..1.1f64,
    ) {
        let grid = smooth_grid(48, ax, ay, phase);
        let index = build_inverse_index(&grid);
        let q = NormCoord::new(qx, qy);
        let (fast, slow) = (index.nearest(q), index.nearest_brute_force(q));
        prop_assert!((fast.dist_sq - slow.dist_sq).abs() <= 1e-15);
    }

    #[test]
    fn identity_warp_is_lossless(seed in 0u64..1000, side in 4usize..40) {
        let dims = GridDims::new(side, side + 3).unwrap();
        let field = ScalarField::from_fn(dims, |i, j| (((i * 31 + j * 17) as u64 ^ seed) % 7) as f64);
        let image = Image::new(vec![field.clone()]).unwrap();
        let out = warp_image(&image, &make_uniform_grid(dims));
        for (a, b) in out.channels()[0].as_slice().iter().zip(field.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn loss_vanishes_only_below_target(ratios in prop::collection::vec(0.01..6.0f64, 1..8)) {
        let cfg = ZoomLossConfig::default();
        let loss = zoom_loss(&ratios, &cfg);
        prop_assert!(loss >= 0.0);
        let below = ratios.iter().any(|&m| m < cfg.alpha);
        prop_assert_eq!(loss > 0.0, below);
    }
}
