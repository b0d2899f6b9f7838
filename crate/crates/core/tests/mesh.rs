use isospec_core::assembly::assemble_base;
use isospec_core::eigen::{solve, DEFAULT_TOL_DEG};
use isospec_core::error::TopologyFault;
use isospec_core::surface::{load_mesh, parse_off, write_off, DiscreteSurface};
use isospec_core::Error;

const ICOSPHERE2: &str = include_str!("../data/icosphere2.off");

fn icosphere() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    parse_off(ICOSPHERE2).unwrap()
}

fn fault(r: isospec_core::Result<DiscreteSurface>) -> TopologyFault {
    match r {
        Err(Error::Topology(f)) => f,
        other => panic!("expected a topology error, got {other:?}"),
    }
}

#[test]
fn single_triangle_has_a_boundary() {
    let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let f = fault(DiscreteSurface::from_mesh(v, vec![[0, 1, 2]]));
    assert!(matches!(f, TopologyFault::BoundaryEdge { .. }));
}

#[test]
fn sphere_with_a_hole_is_rejected() {
    let (v, mut t) = icosphere();
    t.remove(17);
    let f = fault(DiscreteSurface::from_mesh(v, t));
    assert!(matches!(f, TopologyFault::BoundaryEdge { .. }));
}

#[test]
fn flipped_face_is_rejected() {
    let (v, mut t) = icosphere();
    t[3].swap(0, 1);
    let f = fault(DiscreteSurface::from_mesh(v, t));
    assert!(matches!(f, TopologyFault::InconsistentOrientation { .. }));
}

#[test]
fn two_spheres_are_disconnected() {
    let (mut v, mut t) = icosphere();
    let offset = v.len();
    v.extend(v.clone().iter().map(|p| [p[0] + 3.0, p[1], p[2]]));
    t.extend(t.clone().iter().map(|f| f.map(|i| i + offset)));
    let f = fault(DiscreteSurface::from_mesh(v, t));
    assert_eq!(f, TopologyFault::Disconnected { components: 2 });
}

#[test]
fn repeated_vertex_in_a_face_is_rejected() {
    let (v, mut t) = icosphere();
    t[0] = [t[0][0], t[0][0], t[0][2]];
    let f = fault(DiscreteSurface::from_mesh(v, t));
    assert_eq!(f, TopologyFault::DegenerateFace { face: 0 });
}

#[test]
fn malformed_off_reports_a_line() {
    assert!(matches!(
        parse_off("OFF\n3 1 0\n0 0 0\n1 0\n"),
        Err(Error::Parse { .. })
    ));
    assert!(matches!(parse_off("PLY\n"), Err(Error::Parse { .. })));
}

#[test]
fn icosphere_round_trips_and_looks_like_a_sphere() {
    let (v, t) = icosphere();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sphere.off");
    write_off(std::fs::File::create(&path).unwrap(), &v, &t).unwrap();
    let s = load_mesh(&path).unwrap();
    assert_eq!(s.mesh_data().unwrap().vertices, v);
    let topo = s.topology();
    assert_eq!(topo.euler_characteristic, 2);
    assert_eq!(topo.genus, 0);
    let area = 4.0 * std::f64::consts::PI;
    assert!((s.area() - area).abs() < 0.05 * area);

    // first nonzero cluster approximates l = 1 on the unit sphere, λ = 2
    let pair = assemble_base(&s).unwrap();
    let spec = solve(&pair, 4, DEFAULT_TOL_DEG).unwrap();
    let lambda = spec.eigenvalues();
    assert!(lambda[0].abs() < 1e-9);
    for l in &lambda[1..4] {
        assert!((l - 2.0).abs() < 0.05, "{l}");
    }
}
