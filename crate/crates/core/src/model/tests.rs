use super::*;

#[test]
fn length_regulate_examples() {
    let mut g = Graph::new();
    let h = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
    let y = length_regulate(&mut g, h, &[2, 1, 3]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
    let y = length_regulate(&mut g, h, &[1, 0, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 3.0, 3.0]);
    let y = length_regulate(&mut g, h, &[1, 1, 1]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    assert!(matches!(length_regulate(&mut g, h, &[0, 0, 0]), Err(Error::Empty(_))));
    assert!(length_regulate(&mut g, h, &[1, 1]).is_err());
}

#[test]
fn durations_from_log_floor() {
    assert_eq!(durations_from_log(&[log_duration(3), log_duration(0), log_duration(5)]), vec![3, 0, 5]);
    assert_eq!(durations_from_log(&[-3.0, -1.0, -2.0]), vec![0, 1, 0]);
}
