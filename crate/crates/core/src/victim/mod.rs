//! Victim workloads: T-table AES and square-and-multiply RSA.

pub mod aes;
pub mod rsa;
