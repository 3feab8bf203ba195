pub mod dc;
pub mod gradcheck;
