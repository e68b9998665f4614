mod basic;
mod conv;
mod loss;
mod norm;

pub use loss::IGNORE_LABEL;
