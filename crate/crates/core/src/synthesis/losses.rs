use fbnet_autograd::Var;

/// Binary cross-entropy GAN objectives on logits, non-saturating for the
/// generator: `(loss_D, loss_G)` with
/// `loss_D = -E log s(D(real)) - E log(1 - s(D(fake)))` and
/// `loss_G = -E log s(D(fake))`.
pub fn gan_losses<'g>(real_logits: &Var<'g>, fake_logits: &Var<'g>) -> (Var<'g>, Var<'g>) {
    let d_real = real_logits.neg().softplus().mean();
    let d_fake = fake_logits.softplus().mean();
    let g = fake_logits.neg().softplus().mean();
    (d_real.add(&d_fake), g)
}

/// Mean over the batch of `||z - z'||^2 + ||theta - theta'||^2`.
pub fn identity_loss<'g>(z: &Var<'g>, theta: &Var<'g>, z_prime: &Var<'g>, theta_prime: &Var<'g>) -> Var<'g> {
    let n = z.shape()[0] as f64;
    let dz = z.sub(z_prime).square().sum();
    let dt = theta.sub(theta_prime).square().sum();
    dz.add(&dt).mul_scalar(1.0 / n)
}
