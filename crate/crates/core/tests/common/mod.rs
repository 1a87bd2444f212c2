pub mod audited;
pub mod fixtures;
pub mod gradaudit;
pub mod oracles;
