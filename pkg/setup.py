from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="actinf",
    version="0.1",
    description="Scaled active inference agents: free-energy model learning and expected-free-energy planning",
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="MIT",
    keywords="active inference, free energy, model-based reinforcement learning, Bayesian neural network, cross-entropy method, exploration",
    classifiers=[
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.22",
        "scipy",
        "pandas",
        "matplotlib",
    ],
    entry_points={
        "console_scripts": ["actinf = actinf.cli:main"],
    },
    packages=find_packages(where="src"),
    package_dir={"": "src"},
)
