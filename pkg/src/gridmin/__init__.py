"""Split-circuit AC power flow with G-min and Tx stepping homotopies."""
