//! Gauss–Legendre rules used for kernel moments over grid cells.

const NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// `∫_0^1 f(r) dr` with eight points; exact for polynomials of degree 15.
pub fn unit_interval(f: impl Fn(f64) -> f64) -> f64 {
    NODES
        .iter()
        .zip(WEIGHTS.iter())
        .map(|(x, w)| 0.5 * w * f(0.5 * (x + 1.0)))
        .sum()
}
