//! The two reference systems: a second-order open-loop unstable MISO plant
//! and a linearized quadruple-tank MIMO plant.

use nalgebra::dmatrix;

use crate::attack::{build_attack, miso_attack, AttackModel};
use crate::control::PlantModel;
use crate::linalg::Matrix;

pub const DEFAULT_ARL_H: f64 = 1000.0;

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub plant: PlantModel,
    pub attack: AttackModel,
    /// Scalar attack parameters, present for the MISO preset.
    pub miso: Option<(f64, f64)>,
    pub arl_h: f64,
}

pub fn system_a() -> Preset {
    let plant = PlantModel {
        a: dmatrix![0.75, 0.2; 0.2, 1.0],
        b: dmatrix![0.9, 0.5; 0.1, 1.2],
        c: dmatrix![1.0, -1.0],
        q: Matrix::from_diagonal(&nalgebra::dvector![1.0, 1.0]),
        r: dmatrix![1.0],
        w: Matrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]),
        u: Matrix::from_diagonal(&nalgebra::dvector![0.4, 0.7]),
    };
    Preset {
        name: "system-a",
        plant,
        attack: miso_attack(0.5, 10.0).expect("preset attack is valid"),
        miso: Some((0.5, 10.0)),
        arl_h: DEFAULT_ARL_H,
    }
}

pub fn system_b() -> Preset {
    let plant = PlantModel {
        a: dmatrix![
            0.968, 0.0, 0.082, 0.0;
            0.0, 0.978, 0.0, 0.064;
            0.0, 0.0, 0.917, 0.0;
            0.0, 0.0, 0.0, 0.935
        ],
        b: dmatrix![
            0.164, 0.004;
            0.002, 0.124;
            0.0, 0.092;
            0.060, 0.0
        ],
        c: dmatrix![
            5.0, 0.0, 0.0, 0.0;
            0.0, 5.0, 0.0, 0.0
        ],
        q: Matrix::from_diagonal(&nalgebra::dvector![0.25, 0.25, 0.25, 0.25]),
        r: Matrix::from_diagonal(&nalgebra::dvector![0.5, 0.5]),
        w: Matrix::from_diagonal(&nalgebra::dvector![5.0, 5.0, 1.0, 1.0]),
        u: Matrix::from_diagonal(&nalgebra::dvector![2.0, 2.0]),
    };
    // The four listed generator entries are read row-major into a 2x2 matrix.
    let attack = build_attack(
        dmatrix![0.4, 0.2; 0.2, 0.7],
        Matrix::from_diagonal(&nalgebra::dvector![5.0, 5.0]),
    )
    .expect("preset attack is valid");
    Preset {
        name: "system-b",
        plant,
        attack,
        miso: None,
        arl_h: DEFAULT_ARL_H,
    }
}

pub fn by_name(name: &str) -> Option<Preset> {
    match name {
        "system-a" => Some(system_a()),
        "system-b" => Some(system_b()),
        _ => None,
    }
}
