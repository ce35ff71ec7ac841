"""Scale-equivariant U-Net."""
