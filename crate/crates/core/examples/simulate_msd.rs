//! Builds the three-mass chain, moves it to observability coordinates and
//! prints the first samples of a simulated trajectory as CSV.
use mspc::model::{build_msd_chain, simulate, to_observability_form, MsdParams};
use mspc::rng;
use nalgebra::DVector;

fn main() -> mspc::Result<()> {
    let chain = build_msd_chain(&MsdParams::default())?;
    let (model, _) = to_observability_form(&chain)?;
    println!("A eigenvalues: {:?}", model.a.complex_eigenvalues().as_slice());
    let inputs: Vec<_> = (0..200).map(|t| rng::normal_vector(7, rng::streams::EXCITATION, t, 1) * 2.0).collect();
    let traj = simulate(&model, &DVector::zeros(model.n_x()), &inputs, 7);
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    for line in String::from_utf8_lossy(&buf).lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
