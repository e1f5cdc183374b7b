//! Persistence: binary model/heads/image files, the dataset manifest, and
//! inference logs.
