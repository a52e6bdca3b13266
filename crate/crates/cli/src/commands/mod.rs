pub mod consistency;
pub mod flops;
pub mod forward;
pub mod gradcheck;
