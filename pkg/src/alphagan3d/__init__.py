"""alphagan3d: a self-contained 3D alpha-GAN synthesis engine for
volumetric brain scans, runnable at desk scale on synthetic phantoms."""

__version__ = "0.1.0"
