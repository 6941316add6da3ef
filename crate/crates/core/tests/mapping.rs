mod common;

use collis::data::{generate_scene, Point, PointCloud, SceneConfig};
use collis::repr::{compose_mapping, gather, project, scatter_labels};
use common::{brute_force_route, test_grids};
use proptest::prelude::*;

#[test]
fn beam_clouds_satisfy_mapping_oracles() {
    println!("{}", common::mapping_suite(100, 5).unwrap_or_else(|e| panic!("{e}")));
}

#[test]
fn generated_scenes_route_like_brute_force() {
    let cloud = generate_scene(12, &SceneConfig::default()).unwrap();
    let grids = test_grids();
    for src in &grids {
        for dst in &grids {
            let (a, b) = (project(&cloud, src).unwrap(), project(&cloud, dst).unwrap());
            let table = compose_mapping(&a, &b).unwrap();
            let oracle = brute_force_route(&cloud, src, a.point_to_cell(), b.point_to_cell());
            assert_eq!(table.entries(), oracle.as_slice(), "{} -> {}", src.name(), dst.name());
        }
    }
}

#[test]
fn self_composition_is_identity_on_occupied_cells() {
    let cloud = generate_scene(2, &SceneConfig::default()).unwrap();
    for g in test_grids() {
        let m = project(&cloud, &g).unwrap();
        let table = compose_mapping(&m, &m).unwrap();
        assert!(table.entries().iter().all(|&(c, d)| d == Some(c)));
        assert_eq!(table.len(), m.occupied_cells().len());
    }
}

fn point() -> impl Strategy<Value = Point> {
    (-60.0f32..60.0, -60.0f32..60.0, -8.0f32..8.0).prop_map(|(x, y, z)| Point::new(x, y, z, 0.5))
}

proptest! {
    #[test]
    fn gathered_labels_come_from_the_same_cell(points in prop::collection::vec(point(), 1..120)) {
        let cloud = PointCloud::new(points, 4).unwrap();
        let labels: Vec<u8> = (0..cloud.len()).map(|i| (i % 4) as u8).collect();
        for g in test_grids() {
            let m = project(&cloud, &g).unwrap();
            let back = gather(&m, &scatter_labels(&m, &labels).unwrap());
            for (i, v) in back.iter().enumerate() {
                match (m.point_to_cell()[i], v) {
                    (None, None) => {}
                    (Some(c), Some(l)) => {
                        let w = m.winner(c).unwrap();
                        prop_assert_eq!(labels[w], *l);
                        prop_assert_eq!(m.point_to_cell()[w], Some(c));
                    }
                    other => prop_assert!(false, "point {} mapped as {:?}", i, other),
                }
            }
            let occupancy: u32 = m.occupancy().iter().sum();
            prop_assert_eq!(occupancy as usize, m.in_bounds_count());
        }
    }
}
