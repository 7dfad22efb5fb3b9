use proptest::prelude::*;
use raydf::cli::build_dataset;
use raydf::config::RunConfig;
use raydf::eval::{
    ade, chamfer, chamfer_with, classification_metrics, decode_rendered, encode_rendered, export_pointcloud, render_view,
    surface_points, view_ade, NeighborSearch, RenderOptions, RenderedView,
};
use raydf::geometry::Vec3;
use raydf::model::{Architecture, DistanceField};
use raydf::Error;

fn small_config() -> RunConfig {
    RunConfig::from_toml("seed = 2\nscene.name = \"box+sphere\"\nrender.width = 20\nrender.height = 20\n").unwrap()
}

#[test]
fn perfect_rasters_score_zero() {
    let cfg = small_config();
    let data = build_dataset(&cfg).unwrap();
    let sphere = data.scene.bounding;
    for scan in &data.test {
        let view = RenderedView::from_scan(scan, &sphere).unwrap();
        assert_eq!(view.valid_count(), scan.valid_count());
        assert!(view_ade(&view, scan, &sphere).unwrap() < 1e-4);
    }
}

#[test]
fn rasters_round_trip() {
    let cfg = small_config();
    let data = build_dataset(&cfg).unwrap();
    let view = RenderedView::from_scan(&data.test[0], &data.scene.bounding).unwrap();
    let decoded = decode_rendered(&encode_rendered(&view)).unwrap();
    assert_eq!(view, decoded);
    let mut bytes = encode_rendered(&view);
    bytes[0] = b'X';
    assert!(decode_rendered(&bytes).is_err());
}

#[test]
fn render_evaluates_each_pixel_once() {
    let cfg = small_config();
    let data = build_dataset(&cfg).unwrap();
    let arch = Architecture {
        hidden: 16,
        layers: 3,
        omega: 30.0,
    };
    let field = DistanceField::new(arch, false, 4).unwrap();
    let cam = &data.test[0].camera;
    let view = render_view(&field, cam, &data.scene.bounding, &RenderOptions::default()).unwrap();
    assert_eq!(view.pixel_count(), 400);
    assert_eq!(view.evaluations, view.valid_count() as u64);
    assert_eq!(field.evaluations(), view.evaluations);
    for (i, n) in view.normal.iter().enumerate() {
        if view.valid[i] && !view.outlier[i] {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-3, "pixel {i}: |n| = {len}");
        }
    }
}

#[test]
fn pointcloud_export_counts_points() {
    let cfg = small_config();
    let data = build_dataset(&cfg).unwrap();
    let views: Vec<RenderedView> = data
        .test
        .iter()
        .take(3)
        .map(|s| RenderedView::from_scan(s, &data.scene.bounding).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    let n = export_pointcloud(&views, &path).unwrap();
    let expected: usize = views.iter().map(|v| surface_points(v, None).len()).sum();
    assert_eq!(n, expected);
    let text = std::fs::read(&path).unwrap();
    let header = String::from_utf8_lossy(&text[..200.min(text.len())]).into_owned();
    assert!(header.starts_with("ply\n"));
    assert!(header.contains(&format!("element vertex {n}")));
}

#[test]
fn metric_edge_cases() {
    assert!(matches!(ade(&[1.0], &[1.0], &[false]), Err(Error::EmptyMask)));
    assert!(chamfer(&[], &[Vec3::zeros()]).is_err());
    let (acc, f1) = classification_metrics(&[0.9, 0.1], &[1, 0]).unwrap();
    assert_eq!((acc, f1), (100.0, 100.0));
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), n..n + 60)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
}

proptest! {
    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(a in cloud(1), b in cloud(1)) {
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        prop_assert!((ab.mean - ba.mean).abs() < 1e-12);
        prop_assert!((ab.median - ba.median).abs() < 1e-12);
        prop_assert!(ab.mean >= 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap().mean, 0.0);
    }

    #[test]
    fn grid_search_matches_brute_force(a in cloud(1), b in cloud(1)) {
        let grid = chamfer_with(&a, &b, NeighborSearch::Grid).unwrap();
        let brute = chamfer_with(&a, &b, NeighborSearch::BruteForce).unwrap();
        prop_assert!((grid.mean - brute.mean).abs() < 1e-12);
        prop_assert!((grid.median - brute.median).abs() < 1e-12);
    }

    #[test]
    fn ade_is_scaled_mean_error(
        rows in proptest::collection::vec((0.0f64..3.0, 0.0f64..3.0, any::<bool>()), 1..50),
    ) {
        let pred: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let gt: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mask: Vec<bool> = rows.iter().map(|r| r.2).collect();
        let kept: Vec<f64> = rows.iter().filter(|r| r.2).map(|r| (r.0 - r.1).abs()).collect();
        match ade(&pred, &gt, &mask) {
            Ok(v) => prop_assert!((v - 100.0 * kept.iter().sum::<f64>() / kept.len() as f64).abs() < 1e-9),
            Err(_) => prop_assert!(kept.is_empty()),
        }
    }
}
