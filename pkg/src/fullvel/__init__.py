"""Full 3D velocity of radar returns from Doppler and camera optical flow."""
