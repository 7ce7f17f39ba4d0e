//! Runs the gradient and mask checks, then again with a deliberately broken
//! backward pass to show how the fault is located.
//!
//! cargo run --release --example grad_check

use omg_fuser::check::{run_checks, CheckOptions};
use omg_fuser::omg_tensor::OpKind;

fn main() -> omg_fuser::Result<()> {
    let clean = run_checks(&CheckOptions::default())?;
    print!("{clean}");
    let faulty = run_checks(&CheckOptions { quick: true, fault: Some(OpKind::Attention), ..Default::default() })?;
    print!("\nwith an attention fault:\n{faulty}");
    Ok(())
}
