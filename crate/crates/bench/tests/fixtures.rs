use lapis_bench::{ks_shred, ks_temporal, noise, sensor_window};

#[test]
fn noise_is_seeded_and_bounded() {
    let a = noise(&[8, 5], 3);
    assert_eq!(a, noise(&[8, 5], 3));
    assert_ne!(a, noise(&[8, 5], 4));
    assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
}

#[test]
fn fixtures_have_the_benchmarked_shapes() {
    let shred = ks_shred();
    let z = shred.encode(&noise(&[40, 3], 0)).unwrap();
    assert_eq!(z.shape(), &[40, 64]);
    assert_eq!(shred.decode(&z).unwrap().shape(), &[40, 64 * 64]);
    let g = ks_temporal().generate(&z.slice_rows(30, 40).unwrap(), 91).unwrap();
    assert_eq!(g.shape(), &[91, 64]);
    assert_eq!(sensor_window(10, 3).len(), 10);
}
