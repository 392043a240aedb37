from setuptools import find_packages, setup

setup(
    name="apcsim",
    version="0.1.0",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.10",
    install_requires=["numpy", "python-dotenv", "click"],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["apcsim=apcsim.cli:main"]},
)
