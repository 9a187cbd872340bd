//! Desk-scale laboratory for trigger-conditioned ranking attacks on
//! world-model planners: a small autodiff core, pixel toy environments,
//! a learnable latent world model, imagination/MPC planners, the patch
//! attack itself, image-space defenses, and an evaluation harness.

pub mod attack;
pub mod defenses;
pub mod diffmath;
pub mod envs;
pub mod harness;
pub mod planner;
pub mod worldmodel;

/// Mix a master seed with a stream tag into an independent child seed
/// (splitmix64 finalizer).
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(0x94d049bb133111eb);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
