from setuptools import setup, find_packages

setup(
    name="fmapnet",
    version="0.1",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        'numpy>=1.22',
        'scipy',
        'pandas',
        'joblib',
        'python-dotenv',
        'trimesh'
    ],
    extras_require={
        'test': ['pytest']
    },
    entry_points={
        'console_scripts': ['fmapnet=fmapnet.cli:main']
    },
)
