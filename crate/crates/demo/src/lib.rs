//! Placeholder; demo content lands here.
