//! Exit codes: 2 for bad input, 3 for pipeline failures, 1 for anything else.

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub trait Exit<T> {
    fn input(self) -> Result<T, Failure>;
    fn pipeline(self) -> Result<T, Failure>;
    fn output(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Exit<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, error: e.into() })
    }

    fn pipeline(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 3, error: e.into() })
    }

    fn output(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 1, error: e.into() })
    }
}
