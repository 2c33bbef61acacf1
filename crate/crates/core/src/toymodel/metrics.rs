/// Mean Dice over `classes`. A class absent from both masks scores 1.
pub fn mdsc(pred: &[usize], gt: &[usize], classes: &[usize]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    if classes.is_empty() {
        return 1.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
            for (&a, &b) in pred.iter().zip(gt) {
                let (ia, ib) = (a == c, b == c);
                p += usize::from(ia);
                g += usize::from(ib);
                both += usize::from(ia && ib);
            }
            if p + g == 0 {
                1.0
            } else {
                2.0 * both as f64 / (p + g) as f64
            }
        })
        .sum();
    total / classes.len() as f64
}
