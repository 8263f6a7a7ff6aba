//! Finite-difference audit of every layer and both selection policies.

use nrx::audit::gradient_audit;

fn main() -> nrx::Result<()> {
    for layer in gradient_audit(10)? {
        println!("{:<32} max relative error {:.2e}", layer.layer, layer.max_rel_error);
    }
    Ok(())
}
