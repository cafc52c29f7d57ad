use mudi_core::expr::parse;
use mudi_core::growth::GrowthRate;
use mudi_core::linflow::*;
use mudi_core::manifolds::*;
use mudi_core::nonlinear::{Perturbation, VectorField};
use mudi_core::splitting::*;
use nalgebra::DVector;
use std::sync::Arc;
use std::time::Instant;

fn vec2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_column_slice(&[a, b])
}

#[test]
fn probe_split_cost() {
    let ev = Arc::new(
        TransitionEvaluator::new(
            LinearSystem::diag_hyperbolic(),
            TransitionSettings { window: (-44.0, 44.0), ..TransitionSettings::default() },
        )
        .unwrap(),
    );
    let p: Arc<dyn VectorField> = Arc::new(
        Perturbation::new(
            vec![parse("0").unwrap(), parse("0.1*sin(x1)").unwrap()],
            2, 0.1, 0.0,
        )
        .unwrap(),
    );
    let rate = GrowthRate::exponential();
    let cert = DichotomyCertificate::uniform(1.0, -1.0, 1.0);
    let lp = LpSettings { dt: 0.1, ..LpSettings::default() };
    let ts = TableSettings {
        t_range: (-8.0, 8.0), t_step: 0.5, c_max: 3.5, c_step: 0.1, detect_zero: true,
    };
    let samples = vec![(0.0, vec2(1.0, 0.5)), (2.0, vec2(-0.6, 1.0))];
    let t0 = Instant::now();
    let st = straighten(&ev, p, &rate, &cert, lp, &ts, &samples).unwrap();
    println!("straighten: {:?}", t0.elapsed());
    let flat = st.field;
    let cx = LpContext::new(&ev, flat.as_ref(), &rate, &cert, lp);
    let _sm = SplitMap::new(&cx, SplitSettings::default()).unwrap();
    let x = vec2(1.0, 1.0);
    let t0 = Instant::now();
    let bs = cx.base_trajectory(0.0, &x, Side::Stable).unwrap();
    println!("stable base: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let bu = cx.base_trajectory(0.0, &x, Side::Unstable).unwrap();
    println!("unstable base: {:?}", t0.elapsed());
    let z = vec2(0.0, 0.0);
    let t0 = Instant::now();
    let _h1 = cx.solve_leaf_with_base(&bs, &z).unwrap();
    println!("stable leaf: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let _h2 = cx.solve_leaf_with_base(&bu, &z).unwrap();
    println!("unstable leaf: {:?}", t0.elapsed());
}
